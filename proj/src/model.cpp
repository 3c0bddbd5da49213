#include "ssr/model.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/QR>

#include "ssr/eigen_bridge.hpp"

namespace ssr {

MaskSample sample_band_mask(std::size_t n_bands, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw DataError("band mask: rate must be in [0,1)");
  if (n_bands == 0) throw DataError("band mask: no bands");
  MaskSample s;
  s.rate = rate;
  s.gamma.assign(n_bands, 0);
  for (int attempt = 0; attempt < 8; ++attempt) {
    bool any = false;
    for (std::size_t b = 0; b < n_bands; ++b) {
      s.gamma[b] = uniform(rng) < 1.0 - rate ? 1 : 0;
      any = any || s.gamma[b];
    }
    if (any) return s;
  }
  std::fill(s.gamma.begin(), s.gamma.end(), 0);
  s.gamma[uniform_index(rng, n_bands)] = 1;  // force-keep one band
  return s;
}

BandStack apply_band_mask(const BandStack& stack, const MaskSample& mask) {
  if (mask.gamma.size() != stack.extended_bands())
    throw DataError("band mask: gamma length does not match extended bands");
  BandStack out = stack;
  for (std::size_t b = 0; b < out.components.size(); ++b)
    if (!mask.gamma[b]) out.components[b].setZero();
  return out;
}

ValueId hsno_apply(Tape& tape, ValueId stack, ValueId wq, ValueId wk, ValueId cores) {
  const Tensor& x = tape.value(stack);
  const Tensor& q = tape.value(wq);
  const Tensor& k = tape.value(wk);
  const Tensor& v = tape.value(cores);
  if (x.rank() != 3) throw DataError("hsno: stack must be N x B x d");
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 3 || q.shape != k.shape)
    throw DataError("hsno: kernel factor shapes inconsistent");
  if (q.shape[1] == 0) throw DataError("hsno: rank must be positive");
  if (q.shape[0] != x.shape[1]) throw DataError("hsno: band axis mismatch");
  if (v.shape[0] != q.shape[1] || v.shape[1] != x.shape[2] || v.shape[2] != x.shape[2])
    throw DataError("hsno: core shapes inconsistent");
  ValueId qi = tape.contract(stack, wk, "nbd,br->nrd");
  ValueId ti = tape.contract(qi, cores, "nrd,red->nre");
  return tape.contract(ti, wq, "nre,br->nbe");
}

GateResult graph_gate_apply(Tape& tape, ValueId z, ValueId w_out, ValueId gate_a, ValueId gate_b,
                            ValueId dtil, double slope) {
  ValueId projected = tape.contract(z, w_out, "nbd,ed->nbe");
  ValueId phi = tape.leaky_relu(projected, slope);
  ValueId pre = tape.add(tape.contract(dtil, gate_a, "n,b->nb"), gate_b);
  ValueId gate = tape.sigmoid(pre);
  ValueId h = tape.contract(phi, gate, "nbe,nb->nbe");
  return {h, gate};
}

FuseResult fuse_bands_apply(Tape& tape, ValueId h, ValueId id_emb, ValueId stats, ValueId w1,
                            ValueId b1, ValueId w2, ValueId b2, std::size_t dim, std::size_t bands,
                            double slope) {
  std::vector<std::size_t> id_rows(dim), stat_rows(bands);
  for (std::size_t i = 0; i < dim; ++i) id_rows[i] = i;
  for (std::size_t i = 0; i < bands; ++i) stat_rows[i] = dim + i;
  ValueId w1_id = tape.gather(w1, id_rows);
  ValueId w1_stats = tape.gather(w1, stat_rows);
  ValueId hidden = tape.add(
      tape.add(tape.matmul(id_emb, w1_id), tape.matmul(stats, w1_stats)), b1);
  ValueId act = tape.leaky_relu(hidden, slope);
  ValueId logits = tape.add(tape.matmul(act, w2), b2);
  ValueId alpha = tape.softmax(logits);
  ValueId z = tape.contract(alpha, h, "nb,nbd->nd");
  return {z, alpha};
}

// ---------------------------------------------------------------------------

SsrModel::SsrModel(const BipartiteGraph& graph, const Spectrum& spectrum, Eigen::MatrixXd img,
                   Eigen::MatrixXd txt, ModelConfig cfg)
    : cfg_(cfg),
      n_users_(graph.n_users),
      n_items_(graph.n_items),
      spectrum_(&spectrum),
      raw_img_(std::move(img)),
      raw_txt_(std::move(txt)) {
  if (spectrum.n_nodes() != n_nodes()) throw DataError("model: spectrum/graph node mismatch");
  modalities_.push_back("id");
  if (cfg_.use_modalities) {
    if (static_cast<std::size_t>(raw_img_.rows()) != n_nodes() ||
        static_cast<std::size_t>(raw_txt_.rows()) != n_nodes())
      throw DataError("model: propagated modality features must have N rows");
    modalities_.push_back("img");
    modalities_.push_back("txt");
  }
  init_params();
  freeze_partitions();
  build_constants(graph);
}

SsrModel::SsrModel(const BipartiteGraph& graph, const Spectrum& spectrum, Eigen::MatrixXd img,
                   Eigen::MatrixXd txt, ModelConfig cfg,
                   const std::map<std::string, BandPartition>& partitions)
    : cfg_(cfg),
      n_users_(graph.n_users),
      n_items_(graph.n_items),
      spectrum_(&spectrum),
      raw_img_(std::move(img)),
      raw_txt_(std::move(txt)) {
  if (spectrum.n_nodes() != n_nodes()) throw DataError("model: spectrum/graph node mismatch");
  modalities_.push_back("id");
  if (cfg_.use_modalities) {
    modalities_.push_back("img");
    modalities_.push_back("txt");
  }
  init_params();
  partitions_ = partitions;
  for (const auto& name : modalities_) {
    if (!partitions_.count(name)) throw DataError("model: missing partition for '" + name + "'");
    for (std::size_t m = 0; m < cfg_.bands; ++m) band_axis_map_.emplace_back(name, m + 1);
  }
  build_constants(graph);
}

void SsrModel::init_params() {
  const std::size_t d = cfg_.dim;
  const std::size_t b = cfg_.bands * modalities_.size();
  const std::size_t h = cfg_.gate_hidden;
  const std::size_t r = cfg_.cp_rank;
  Rng rng(derive_seed(cfg_.seed, 0x9a11));

  auto xavier = [&](Shape shape, double bound) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = uniform(rng, -bound, bound);
    return t;
  };

  const double db = 1.0 / std::sqrt(static_cast<double>(d));
  params_.add("user_emb", xavier({n_users_, d}, db));
  params_.add("item_emb", xavier({n_items_, d}, db));
  if (cfg_.use_modalities) {
    params_.add("proj_img", xavier({static_cast<std::size_t>(raw_img_.cols()), d}, db));
    params_.add("proj_txt", xavier({static_cast<std::size_t>(raw_txt_.cols()), d}, db));
  }
  params_.add("gate_w1", xavier({d + b, h}, 1.0 / std::sqrt(static_cast<double>(d + b))));
  params_.add("gate_b1", Tensor({h}));
  params_.add("gate_w2", xavier({h, b}, 1.0 / std::sqrt(static_cast<double>(h))));
  params_.add("gate_b2", Tensor({b}));
  // The leading factor column is a uniform passthrough (columns of the
  // initial kernel sum to ~1), so band content survives the fused sum at
  // initialization; the remaining rank directions start as small noise. A
  // sign-random kernel instead erases random band combinations and stalls
  // early training.
  {
    const double lead = 1.0 / std::sqrt(static_cast<double>(b));
    Tensor wq({b, r}), wk({b, r});
    for (std::size_t i = 0; i < b; ++i) {
      wq.at(i, 0) = lead;
      wk.at(i, 0) = lead;
      for (std::size_t j = 1; j < r; ++j) {
        wq.at(i, j) = uniform(rng, -0.2, 0.2) / std::sqrt(static_cast<double>(r));
        wk.at(i, j) = uniform(rng, -0.2, 0.2) / std::sqrt(static_cast<double>(r));
      }
    }
    params_.add("cp_wq", std::move(wq));
    params_.add("cp_wk", std::move(wk));
  }
  Tensor cores = xavier({r, d, d}, db);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < d; ++j) cores.at(i, j, j) += 1.0;
  params_.add("cp_v", std::move(cores));
  Tensor w_out = xavier({d, d}, db);
  for (std::size_t j = 0; j < d; ++j) w_out.at(j, j) += 1.0;
  params_.add("out_proj", std::move(w_out));
  params_.add("graph_gate_a", Tensor({b}));
  params_.add("graph_gate_b", Tensor({b}));
}

std::vector<std::pair<std::string, Eigen::MatrixXd>> SsrModel::projected_signals() const {
  std::vector<std::pair<std::string, Eigen::MatrixXd>> out;
  const auto n = static_cast<Eigen::Index>(n_nodes());
  const auto d = static_cast<Eigen::Index>(cfg_.dim);
  Eigen::MatrixXd id(n, d);
  id.topRows(static_cast<Eigen::Index>(n_users_)) = eigen_from(params_.get("user_emb"));
  id.bottomRows(static_cast<Eigen::Index>(n_items_)) = eigen_from(params_.get("item_emb"));
  out.emplace_back("id", std::move(id));
  if (cfg_.use_modalities) {
    out.emplace_back("img", raw_img_ * eigen_from(params_.get("proj_img")));
    out.emplace_back("txt", raw_txt_ * eigen_from(params_.get("proj_txt")));
  }
  return out;
}

void SsrModel::freeze_partitions() {
  if (cfg_.bands == 1) {
    // single-band mode bypasses the GFT; a trivial partition keeps the
    // bookkeeping uniform
    BandPartition p;
    p.n_bands = 1;
    p.boundaries = {0, spectrum_->n_modes()};
    p.band_energy = {0.0};
    p.residual_in_last = spectrum_->residual_projector_present;
    for (const auto& name : modalities_) {
      partitions_.emplace(name, p);
      band_axis_map_.emplace_back(name, 1);
    }
    return;
  }
  BandDecomposition dec =
      build_band_stack(projected_signals(), *spectrum_, cfg_.bands, cfg_.shared_partition);
  partitions_ = std::move(dec.partitions);
  band_axis_map_ = std::move(dec.stack.band_axis_map);
}

void SsrModel::build_constants(const BipartiteGraph& graph) {
  c_ut_ = tensor_from(Eigen::MatrixXd(spectrum_->eigenvectors.transpose()));
  c_u_ = tensor_from(spectrum_->eigenvectors);
  for (const auto& name : modalities_) {
    const BandPartition& part = partitions_.at(name);
    auto& slices = c_u_band_[name];
    for (std::size_t m = 0; m < cfg_.bands; ++m) {
      const auto b0 = static_cast<Eigen::Index>(part.band_begin(m));
      const auto len = static_cast<Eigen::Index>(part.band_size(m));
      slices.push_back(tensor_from(Eigen::MatrixXd(spectrum_->eigenvectors.middleCols(b0, len))));
    }
  }
  if (cfg_.use_modalities) {
    c_img_ = tensor_from(raw_img_);
    c_txt_ = tensor_from(raw_txt_);
  }

  dtil_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_nodes()));
  if (cfg_.gate_mode == "degree") {
    for (std::size_t i = 0; i < n_nodes(); ++i)
      dtil_(static_cast<Eigen::Index>(i)) = std::log1p(graph.degrees[i]);
    const double mean = dtil_.mean();
    dtil_.array() -= mean;
    const double sd = std::sqrt(dtil_.squaredNorm() / static_cast<double>(n_nodes()));
    if (sd > 1e-12) dtil_ /= sd;
  } else if (cfg_.gate_mode != "constant") {
    throw DataError("model: gate_mode must be 'degree' or 'constant'");
  }
  c_dtil_ = tensor_from(dtil_);
}

std::vector<ValueId> SsrModel::band_components(Tape& tape) const {
  ValueId x_id = tape.concat(
      {tape.param(params_, "user_emb"), tape.param(params_, "item_emb")}, 0);
  std::vector<std::pair<std::string, ValueId>> signals{{"id", x_id}};
  if (cfg_.use_modalities) {
    signals.emplace_back(
        "img", tape.matmul(tape.constant_view(&c_img_), tape.param(params_, "proj_img")));
    signals.emplace_back(
        "txt", tape.matmul(tape.constant_view(&c_txt_), tape.param(params_, "proj_txt")));
  }

  std::vector<ValueId> bands;
  ValueId ut = tape.constant_view(&c_ut_);
  for (const auto& [name, sig] : signals) {
    if (cfg_.bands == 1) {  // no decomposition
      bands.push_back(sig);
      continue;
    }
    const BandPartition& part = partitions_.at(name);
    ValueId coeffs = tape.matmul(ut, sig);
    for (std::size_t m = 0; m < cfg_.bands; ++m) {
      std::vector<std::size_t> rows(part.band_size(m));
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = part.band_begin(m) + i;
      ValueId comp = tape.matmul(tape.constant_view(&c_u_band_.at(name)[m]),
                                 tape.gather(coeffs, rows));
      if (m + 1 == cfg_.bands && part.residual_in_last &&
          spectrum_->residual_projector_present) {
        ValueId recon = tape.matmul(tape.constant_view(&c_u_), coeffs);
        ValueId residual = tape.add(sig, tape.mul(recon, tape.constant(Tensor::scalar(-1.0))));
        comp = tape.add(comp, residual);
      }
      bands.push_back(comp);
    }
  }
  return bands;
}

ValueId SsrModel::assemble_stack(Tape& tape, const std::vector<ValueId>& bands,
                                 const MaskSample* mask) const {
  if (mask && mask->gamma.size() != bands.size())
    throw DataError("model: mask length does not match extended bands");
  const std::size_t n = n_nodes();
  std::vector<ValueId> slabs;
  slabs.reserve(bands.size());
  for (std::size_t b = 0; b < bands.size(); ++b) {
    ValueId comp = bands[b];
    if (mask && !mask->gamma[b]) comp = tape.mul(comp, tape.constant(Tensor::scalar(0.0)));
    slabs.push_back(tape.reshape(comp, {n, 1, cfg_.dim}));
  }
  return tape.concat(slabs, 1);
}

Tensor SsrModel::band_stats(const Tensor& stack_value) const {
  const std::size_t n = stack_value.shape[0];
  const std::size_t b = stack_value.shape[1];
  const std::size_t d = stack_value.shape[2];
  Tensor stats({n, b});
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      double e = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double v = stack_value.at(i, j, k);
        e += v * v;
      }
      stats.at(i, j) = e;
      total += e;
    }
    if (total > 0.0)
      for (std::size_t j = 0; j < b; ++j) stats.at(i, j) /= total;
    else
      for (std::size_t j = 0; j < b; ++j) stats.at(i, j) = 1.0 / static_cast<double>(b);
  }
  return stats;
}

SsrModel::Head SsrModel::head(Tape& tape, ValueId stack, const Tensor* fixed_stats) const {
  ValueId z3 = hsno_apply(tape, stack, tape.param(params_, "cp_wq"), tape.param(params_, "cp_wk"),
                          tape.param(params_, "cp_v"));
  GateResult gated = graph_gate_apply(tape, z3, tape.param(params_, "out_proj"),
                                      tape.param(params_, "graph_gate_a"),
                                      tape.param(params_, "graph_gate_b"),
                                      tape.constant_view(&c_dtil_), cfg_.leaky_slope);
  Tensor stats = fixed_stats ? *fixed_stats : band_stats(tape.value(stack));
  ValueId stats_id = tape.constant(std::move(stats));
  ValueId id_emb = tape.concat(
      {tape.param(params_, "user_emb"), tape.param(params_, "item_emb")}, 0);
  FuseResult fused = fuse_bands_apply(
      tape, gated.h, id_emb, stats_id, tape.param(params_, "gate_w1"),
      tape.param(params_, "gate_b1"), tape.param(params_, "gate_w2"),
      tape.param(params_, "gate_b2"), cfg_.dim, extended_bands(), cfg_.leaky_slope);
  return {fused.z, fused.alpha, gated.gate};
}

SsrModel::Forward SsrModel::forward(Tape& tape, const MaskSample* mask,
                                    const Tensor* fixed_stats) const {
  Forward f;
  f.bands = band_components(tape);
  f.stack = assemble_stack(tape, f.bands, mask);
  f.head = head(tape, f.stack, fixed_stats);
  return f;
}

Tensor SsrModel::node_embeddings() const {
  Tape tape;
  Forward f = forward(tape);
  return tape.value(f.head.embeddings);
}

ValueId SsrModel::pair_logits(Tape& tape, ValueId embeddings,
                              const std::vector<std::pair<std::size_t, std::size_t>>& pairs) const {
  std::vector<std::size_t> users(pairs.size()), items(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].first >= n_users_ || pairs[i].second >= n_items_)
      throw DataError("score_pairs: pair index out of range");
    users[i] = pairs[i].first;
    items[i] = n_users_ + pairs[i].second;
  }
  ValueId zu = tape.gather(embeddings, users);
  ValueId zv = tape.gather(embeddings, items);
  return tape.contract(zu, zv, "nd,nd->n");
}

std::vector<double> SsrModel::score_pairs(
    const Tensor& embeddings, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) const {
  const std::size_t d = embeddings.shape[1];
  std::vector<double> out(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto [u, v] = pairs[i];
    if (u >= n_users_ || v >= n_items_) throw DataError("score_pairs: pair index out of range");
    double dot = 0.0;
    for (std::size_t k = 0; k < d; ++k)
      dot += embeddings.at(u, k) * embeddings.at(n_users_ + v, k);
    out[i] = 1.0 / (1.0 + std::exp(-dot));
  }
  return out;
}

BandStack SsrModel::current_band_stack() const {
  BandStack stack;
  stack.n_nodes = n_nodes();
  stack.n_bands_per_modality = cfg_.bands;
  stack.dim = cfg_.dim;
  for (const auto& [name, sig] : projected_signals()) {
    stack.modalities.push_back(name);
    if (cfg_.bands == 1) {
      stack.components.push_back(sig);
      stack.band_axis_map.emplace_back(name, 1);
      continue;
    }
    const BandPartition& part = partitions_.at(name);
    Eigen::MatrixXd coeffs = gft_forward(*spectrum_, sig);
    for (std::size_t m = 0; m < cfg_.bands; ++m) {
      stack.components.push_back(reconstruct_band(*spectrum_, coeffs, part, m, &sig));
      stack.band_axis_map.emplace_back(name, m + 1);
    }
  }
  return stack;
}

}  // namespace ssr
