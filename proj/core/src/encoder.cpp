#include "mvdiff/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "mvdiff/error.hpp"
#include "mvdiff/optim.hpp"

namespace mvdiff::encoder {

using numerics::Graph;
using numerics::ParamBinder;
using numerics::ParameterStore;

EmbeddingTables EmbeddingTables::from_store(const ParameterStore& store) {
  EmbeddingTables t;
  for (std::size_t k = 0; k < kViewCount; ++k) t.codes[k] = store.at(kCodeTable[k]).value;
  t.mask = store.at(kMaskTable).value;
  return t;
}

IntraParams IntraParams::from_store(const ParameterStore& store) {
  return {store.at(kIntraQ).value, store.at(kIntraK).value, store.at(kIntraV).value};
}

void add_encoder_parameters(ParameterStore& store, const std::array<std::size_t, kViewCount>& vocab_sizes,
                            std::size_t dim, CounterRng& rng) {
  if (dim == 0) throw ConfigError("dim", "must be positive");
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  for (std::size_t k = 0; k < kViewCount; ++k) {
    store.add(kCodeTable[k], numerics::random_normal(vocab_sizes[k], dim, sd, rng));
  }
  store.add(kMaskTable, numerics::random_normal(2, dim, sd, rng));
  const std::size_t width = kViewCount * dim;
  store.add(kIntraQ, numerics::xavier(width, width, rng));
  store.add(kIntraK, numerics::xavier(width, width, rng));
  store.add(kIntraV, numerics::xavier(width, width, rng));
}

Tensor encode_visit(const corpus::Visit& visit, const EmbeddingTables& tables,
                    const std::array<bool, kViewCount>& keep) {
  const std::size_t d = tables.dim();
  Tensor out = Tensor::zeros(1, kViewCount * d);
  for (std::size_t k = 0; k < kViewCount; ++k) {
    if (!visit.observed[k] || !keep[k]) continue;
    const Tensor& table = tables.codes[k];
    for (auto code : visit.codes[k]) {
      if (code >= table.rows()) {
        throw ValidationError("encode_visit: view " + std::string(corpus::view_key(corpus::kViews[k])) + " code " +
                              std::to_string(code) + " out of range");
      }
      for (std::size_t c = 0; c < d; ++c) out(0, k * d + c) += table(code, c);
    }
  }
  return out;
}

Tensor mask_vector(const std::array<bool, kViewCount>& observed, const EmbeddingTables& tables) {
  const std::size_t d = tables.dim();
  Tensor out = Tensor::zeros(1, kViewCount * d);
  for (std::size_t k = 0; k < kViewCount; ++k) {
    const std::size_t row = observed[k] ? 1 : 0;
    for (std::size_t c = 0; c < d; ++c) out(0, k * d + c) = tables.mask(row, c);
  }
  return out;
}

Tensor intra_condition(std::span<const Tensor> history, const IntraParams& params, std::size_t dim) {
  const std::size_t width = params.wq.rows();
  if (history.empty()) return Tensor::zeros(1, width);
  Tensor h = Tensor::zeros(history.size(), width);
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (history[i].size() != width) throw ShapeError("intra_condition: history row width mismatch");
    std::copy(history[i].values().begin(), history[i].values().end(), h.row_span(i).begin());
  }
  Tensor q = numerics::matmul(h, params.wq);
  Tensor k = numerics::matmul(h, params.wk);
  Tensor v = numerics::matmul(h, params.wv);
  Tensor scores = numerics::scale(numerics::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dim)));
  Tensor attended = numerics::matmul(numerics::softmax_rows(scores), v);
  Tensor out = Tensor::zeros(1, width);
  for (std::size_t r = 0; r < attended.rows(); ++r)
    for (std::size_t c = 0; c < width; ++c) out(0, c) += attended(r, c);
  return numerics::scale(out, 1.0 / static_cast<double>(attended.rows()));
}

Assignment assign_prototype(std::span<const double> v, const Tensor& centroids) {
  Assignment best;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < centroids.rows(); ++i) {
    const double d = numerics::squared_distance(v, centroids.row_span(i));
    if (d < best_d) {
      best_d = d;
      best.index = i;
    }
  }
  auto row = centroids.row_span(best.index);
  best.centroid.assign(row.begin(), row.end());
  return best;
}

KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t max_iters) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  if (k == 0) throw DomainError("kmeans: K must be positive");
  if (n < k) throw DomainError("kmeans: " + std::to_string(n) + " vectors for K=" + std::to_string(k));

  // Forgy start over distinct rows, so no two initial centroids coincide
  // unless the data has fewer than K distinct points.
  std::vector<std::size_t> distinct;
  {
    std::set<std::vector<double>> seen;
    for (std::size_t i = 0; i < n; ++i) {
      auto r = points.row_span(i);
      if (seen.emplace(r.begin(), r.end()).second) distinct.push_back(i);
    }
  }
  CounterRng rng(seed, 0x6b6d65616e73ULL);
  std::vector<std::size_t> init;
  if (distinct.size() >= k) {
    for (auto idx : rng.sample_without_replacement(distinct.size(), k)) init.push_back(distinct[idx]);
  } else {
    init = distinct;
    while (init.size() < k) init.push_back(distinct[rng.uniform_index(distinct.size())]);
  }

  KMeansResult result;
  result.centroids = Tensor::zeros(k, d);
  for (std::size_t c = 0; c < k; ++c) {
    auto src = points.row_span(init[c]);
    std::copy(src.begin(), src.end(), result.centroids.row_span(c).begin());
  }

  std::vector<std::size_t> assignment(n, std::numeric_limits<std::size_t>::max());
  for (std::size_t it = 0; it < std::max<std::size_t>(max_iters, 1); ++it) {
    bool changed = false;
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      auto a = assign_prototype(points.row_span(i), result.centroids);
      objective += numerics::squared_distance(points.row_span(i), result.centroids.row_span(a.index));
      if (a.index != assignment[i]) {
        assignment[i] = a.index;
        changed = true;
      }
    }
    result.objective.push_back(objective);
    result.iterations = it + 1;
    if (!changed) break;

    Tensor sums = Tensor::zeros(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assignment[i]];
      auto r = points.row_span(i);
      auto s = sums.row_span(assignment[i]);
      for (std::size_t c = 0; c < d; ++c) s[c] += r[c];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) continue;
      for (std::size_t c = 0; c < d; ++c) result.centroids(j, c) = sums(j, c) / static_cast<double>(counts[j]);
    }
  }
  result.assignment = std::move(assignment);
  return result;
}

PrototypeSet fit_prototypes(const std::array<std::vector<std::vector<double>>, kViewCount>& vectors, std::size_t k,
                            std::uint64_t seed, std::size_t max_iters) {
  PrototypeSet set;
  for (std::size_t view = 0; view < kViewCount; ++view) {
    const auto& rows = vectors[view];
    if (rows.size() < k) {
      throw DomainError("fit_prototypes: view " + std::string(corpus::view_key(corpus::kViews[view])) + " has " +
                        std::to_string(rows.size()) + " vectors for K=" + std::to_string(k));
    }
    const std::size_t d = rows.front().size();
    Tensor points = Tensor::zeros(rows.size(), d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != d) throw ShapeError("fit_prototypes: ragged vectors");
      std::copy(rows[i].begin(), rows[i].end(), points.row_span(i).begin());
    }
    set.centroids[view] = kmeans(points, k, seed + view, max_iters).centroids;
  }
  return set;
}

PrototypeSet fit_prototypes(const corpus::Cohort& cohort, const EmbeddingTables& tables, std::size_t k,
                            std::uint64_t seed, std::size_t max_iters) {
  const std::size_t d = tables.dim();
  std::array<std::vector<std::vector<double>>, kViewCount> vectors;
  for (const auto& rec : cohort.records) {
    for (const auto& visit : rec.visits) {
      Tensor v = encode_visit(visit, tables);
      for (std::size_t view = 0; view < kViewCount; ++view) {
        if (!visit.observed[view] || visit.imputed[view]) continue;
        auto s = v.values().subspan(view * d, d);
        vectors[view].emplace_back(s.begin(), s.end());
      }
    }
  }
  return fit_prototypes(vectors, k, seed, max_iters);
}

Tensor prototype_condition(const Tensor& v, const std::array<bool, kViewCount>& observed,
                           const PrototypeSet& prototypes) {
  const std::size_t d = prototypes.centroids[0].cols();
  if (v.size() != kViewCount * d) throw ShapeError("prototype_condition: width mismatch");
  Tensor out = Tensor::zeros(1, kViewCount * d);
  for (std::size_t view = 0; view < kViewCount; ++view) {
    if (!observed[view]) continue;
    auto a = assign_prototype(v.values().subspan(view * d, d), prototypes.centroids[view]);
    std::copy(a.centroid.begin(), a.centroid.end(), out.values().begin() + static_cast<std::ptrdiff_t>(view * d));
  }
  return out;
}

std::string SlotLayout::slot_name(std::size_t slot) const {
  static const char* blocks[] = {"z", "c", "b", "v"};
  return std::string(blocks[slot / kViewCount]) + "_" +
         std::string(corpus::view_key(corpus::kViews[slot % kViewCount]));
}

Tensor DiffusionState::block(Block b) const {
  const std::size_t off = layout.block_offset(b);
  return numerics::slice_cols(h, off, off + layout.block_width());
}

Tensor DiffusionState::slot(std::size_t row, Block b, std::size_t view) const {
  const std::size_t off = layout.slot_offset(b, view);
  Tensor out = Tensor::zeros(1, layout.dim);
  for (std::size_t c = 0; c < layout.dim; ++c) out(0, c) = h(row, off + c);
  return out;
}

DiffusionState assemble_h0(const Tensor& z, const Tensor& c, const Tensor& b, const Tensor& v) {
  for (const Tensor* t : {&c, &b, &v}) {
    if (!t->same_shape(z)) {
      throw ShapeError("assemble_h0: block shapes " + z.shape_string() + " and " + t->shape_string() + " differ");
    }
  }
  if (z.cols() % kViewCount != 0) throw ShapeError("assemble_h0: block width not divisible by 3");
  DiffusionState s;
  s.layout.dim = z.cols() / kViewCount;
  const Tensor parts[] = {z, c, b, v};
  s.h = numerics::concat_cols(parts);
  s.noised.assign(z.rows(), {false, false, false});
  return s;
}

Var encode_visits(ParamBinder& p, std::span<const corpus::Visit* const> visits,
                  std::span<const std::array<bool, kViewCount>> keep) {
  if (keep.size() != visits.size()) throw ShapeError("encode_visits: keep flags do not match the batch");
  Graph& g = p.graph();
  std::array<Var, kViewCount> slices;
  for (std::size_t view = 0; view < kViewCount; ++view) {
    Var table = p(kCodeTable[view]);
    std::vector<std::vector<std::size_t>> bags(visits.size());
    for (std::size_t i = 0; i < visits.size(); ++i) {
      const corpus::Visit& v = *visits[i];
      if (!v.observed[view] || !keep[i][view]) continue;
      bags[i].assign(v.codes[view].begin(), v.codes[view].end());
    }
    slices[view] = g.embedding_bag(table, std::move(bags));
  }
  return g.concat_cols(slices);
}

Var mask_vectors(ParamBinder& p, std::span<const std::array<bool, kViewCount>> observed) {
  Graph& g = p.graph();
  Var table = p(kMaskTable);
  std::array<Var, kViewCount> slices;
  for (std::size_t view = 0; view < kViewCount; ++view) {
    std::vector<std::size_t> rows(observed.size());
    for (std::size_t i = 0; i < observed.size(); ++i) rows[i] = observed[i][view] ? 1 : 0;
    slices[view] = g.embedding_lookup(table, std::move(rows));
  }
  return g.concat_cols(slices);
}

Var intra_conditions(ParamBinder& p, std::span<const std::vector<const corpus::Visit*>> histories,
                     std::size_t dim) {
  Graph& g = p.graph();
  const std::size_t width = kViewCount * dim;
  std::vector<const corpus::Visit*> rows;
  std::vector<std::size_t> segments;
  for (const auto& h : histories) {
    rows.insert(rows.end(), h.begin(), h.end());
    segments.push_back(h.size());
  }
  if (rows.empty()) return g.constant(Tensor::zeros(histories.size(), width));
  std::vector<std::array<bool, kViewCount>> keep(rows.size(), {true, true, true});
  Var x = encode_visits(p, rows, keep);
  numerics::AttentionOptions opt;
  opt.heads = 1;
  opt.segments = segments;
  opt.scale = 1.0 / std::sqrt(static_cast<double>(dim));
  Var att = g.attention(g.matmul(x, p(kIntraQ)), g.matmul(x, p(kIntraK)), g.matmul(x, p(kIntraV)), opt);
  return g.segment_mean(att, std::move(segments));
}

}  // namespace mvdiff::encoder
