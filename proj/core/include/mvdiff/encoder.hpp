#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mvdiff/autodiff.hpp"
#include "mvdiff/corpus.hpp"
#include "mvdiff/rng.hpp"
#include "mvdiff/tensor.hpp"

namespace mvdiff::encoder {

using numerics::Tensor;
using numerics::Var;
using corpus::kViewCount;

/// Parameter names used in a ParameterStore.
inline constexpr std::array<const char*, kViewCount> kCodeTable = {"emb.d", "emb.p", "emb.m"};
inline constexpr const char* kMaskTable = "emb.mask";
inline constexpr const char* kIntraQ = "intra.q";
inline constexpr const char* kIntraK = "intra.k";
inline constexpr const char* kIntraV = "intra.v";

/// Per-view code embeddings E_k [V_k, d] and the mask embedding [2, d]
/// (row 0 = missing, row 1 = observed).
struct EmbeddingTables {
  std::array<Tensor, kViewCount> codes;
  Tensor mask;

  std::size_t dim() const noexcept { return mask.cols(); }
  std::size_t width() const noexcept { return kViewCount * dim(); }
  static EmbeddingTables from_store(const numerics::ParameterStore& store);
};

struct IntraParams {
  Tensor wq, wk, wv;  // [D, D]
  static IntraParams from_store(const numerics::ParameterStore& store);
};

/// Adds embedding tables and the intra-history attention weights.
void add_encoder_parameters(numerics::ParameterStore& store, const std::array<std::size_t, kViewCount>& vocab_sizes,
                            std::size_t dim, CounterRng& rng);

/// v = v^d ⊕ v^p ⊕ v^m with each slice the sum of its code embeddings; a view
/// that is unobserved (or excluded by `keep`) is the zero slice. [1, D].
Tensor encode_visit(const corpus::Visit& visit, const EmbeddingTables& tables,
                    const std::array<bool, kViewCount>& keep = {true, true, true});

/// b: slice k is mask row 1 if flag k is set, else row 0. [1, D].
Tensor mask_vector(const std::array<bool, kViewCount>& observed, const EmbeddingTables& tables);

/// z: mean over rows of softmax(H Wq (H Wk)^T / sqrt(d)) H Wv for history
/// rows H [n, D]; zero when the history is empty. No positional encoding.
Tensor intra_condition(std::span<const Tensor> history, const IntraParams& params, std::size_t dim);

struct KMeansResult {
  Tensor centroids;  // [K, d]
  std::vector<std::size_t> assignment;
  /// Objective after each assignment step.
  std::vector<double> objective;
  std::size_t iterations = 0;
};

/// Lloyd's algorithm from a Forgy start (K distinct points chosen by seed).
/// Ties go to the lowest centroid index; an emptied cluster keeps its centroid.
KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t max_iters);

struct PrototypeSet {
  std::array<Tensor, kViewCount> centroids;  // [K, d] each
  std::size_t k() const noexcept { return centroids[0].rows(); }
};

/// One K-means per view over that view's slices. Throws DomainError when a
/// view has fewer than K vectors.
PrototypeSet fit_prototypes(const std::array<std::vector<std::vector<double>>, kViewCount>& vectors, std::size_t k,
                            std::uint64_t seed, std::size_t max_iters);

/// Prototypes over the observed views of every visit of a cohort.
PrototypeSet fit_prototypes(const corpus::Cohort& cohort, const EmbeddingTables& tables, std::size_t k,
                            std::uint64_t seed, std::size_t max_iters);

struct Assignment {
  std::size_t index = 0;
  std::vector<double> centroid;
};
Assignment assign_prototype(std::span<const double> v, const Tensor& centroids);

/// c: per observed view the nearest prototype of its v slice, zero for a
/// missing view. [1, D].
Tensor prototype_condition(const Tensor& v, const std::array<bool, kViewCount>& observed,
                           const PrototypeSet& prototypes);

enum class Block : std::uint8_t { z = 0, c = 1, b = 2, v = 3 };
inline constexpr std::size_t kBlockCount = 4;

/// Slot s = block * 3 + view occupies columns [s*d, (s+1)*d) of h.
struct SlotLayout {
  std::size_t dim = 1;

  std::size_t block_width() const noexcept { return kViewCount * dim; }
  std::size_t width() const noexcept { return kBlockCount * block_width(); }
  std::size_t slot_count() const noexcept { return kBlockCount * kViewCount; }
  std::size_t block_offset(Block b) const noexcept { return static_cast<std::size_t>(b) * block_width(); }
  std::size_t slot_offset(Block b, std::size_t view) const noexcept { return block_offset(b) + view * dim; }
  std::string slot_name(std::size_t slot) const;
  bool generative(Block b) const noexcept { return b == Block::v; }
};

/// h for a batch [B, 12d] with per-row flags for which v-slots are noised.
struct DiffusionState {
  Tensor h;
  std::size_t t = 0;
  SlotLayout layout;
  std::vector<std::array<bool, kViewCount>> noised;

  std::size_t batch() const noexcept { return h.rows(); }
  Tensor block(Block b) const;
  Tensor slot(std::size_t row, Block b, std::size_t view) const;
};

/// h0 = z ⊕ c ⊕ b ⊕ v. Each block is [B, 3d]; nothing is marked noised.
DiffusionState assemble_h0(const Tensor& z, const Tensor& c, const Tensor& b, const Tensor& v);

// Graph versions of the encoding ops, batched by row.

/// [B, D]; view k of row i uses the codes of visits[i] when keep[i][k] is set
/// (and the view is observed), else the zero slice.
Var encode_visits(numerics::ParamBinder& p, std::span<const corpus::Visit* const> visits,
                  std::span<const std::array<bool, kViewCount>> keep);
/// [B, D] mask embeddings.
Var mask_vectors(numerics::ParamBinder& p, std::span<const std::array<bool, kViewCount>> observed);
/// [B, D]; histories[i] lists the earlier visits of row i.
Var intra_conditions(numerics::ParamBinder& p, std::span<const std::vector<const corpus::Visit*>> histories,
                     std::size_t dim);

}  // namespace mvdiff::encoder
