#include "ssr/synth.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "ssr/rng.hpp"
#include "ssr/trainer.hpp"

namespace ssr {

void SyntheticSpec::validate() const {
  if (n_users == 0 || n_items == 0 || n_blocks == 0)
    throw DataError("synth: populations must be positive");
  if (n_users % n_blocks != 0 || n_items % n_blocks != 0)
    throw DataError("synth: n_blocks must divide both n_users and n_items");
  if (modality_noise < 0.0) throw DataError("synth: sigma must be >= 0");
  if (cold_fraction < 0.0 || cold_fraction >= 1.0)
    throw DataError("synth: cold_fraction must be in [0,1)");
  if (interactions_per_user > n_items / n_blocks)
    throw DataError("synth: interactions per user exceed block size without replacement");
  if (interactions_per_user < 5) throw DataError("synth: need at least 5 interactions per user");
  if (cold_fraction > 0.0 && interactions_per_user < 6)
    throw DataError("synth: cold truncation needs interactions_per_user >= 6");
  if (feature_dim == 0) throw DataError("synth: feature_dim must be positive");
}

SyntheticData synth_generate(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, 0x5f));

  SyntheticData out;
  const std::size_t users_per_block = spec.n_users / spec.n_blocks;
  const std::size_t items_per_block = spec.n_items / spec.n_blocks;
  out.user_block.resize(spec.n_users);
  out.item_block.resize(spec.n_items);
  for (std::size_t u = 0; u < spec.n_users; ++u) out.user_block[u] = u / users_per_block;
  for (std::size_t v = 0; v < spec.n_items; ++v) out.item_block[v] = v / items_per_block;

  // One shared centroid per block. Each item carries a latent identity
  // q_v = centroid + nu_v that drives within-block preferences; img/txt
  // observe q_v under independent measurement noise. Marginally each feature
  // is centroid + Gaussian(sigma): Var(nu) + Var(eps) = sigma^2. Centroids
  // are kept at half scale so the within-block taste signal is not drowned
  // out by block identity (the graph already carries the blocks).
  const double part = spec.modality_noise / std::sqrt(2.0);
  Eigen::MatrixXd centroids(spec.n_blocks, spec.feature_dim);
  for (std::size_t b = 0; b < spec.n_blocks; ++b)
    for (std::size_t k = 0; k < spec.feature_dim; ++k)
      centroids(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k)) = 0.5 * gaussian(rng);
  Eigen::MatrixXd item_latent(spec.n_items, spec.feature_dim);
  out.img_features.resize(spec.n_items, spec.feature_dim);
  out.txt_features.resize(spec.n_items, spec.feature_dim);
  for (std::size_t v = 0; v < spec.n_items; ++v) {
    for (std::size_t k = 0; k < spec.feature_dim; ++k) {
      const double c = centroids(static_cast<Eigen::Index>(out.item_block[v]),
                                 static_cast<Eigen::Index>(k));
      const double q = c + part * gaussian(rng);
      item_latent(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(k)) = q;
      out.img_features(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(k)) =
          q + part * gaussian(rng);
      out.txt_features(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(k)) =
          q + part * gaussian(rng);
    }
  }

  // user taste vectors: the within-block preference direction, matching the
  // item latent deviations in scale
  Eigen::MatrixXd user_taste(spec.n_users, spec.feature_dim);
  for (std::size_t u = 0; u < spec.n_users; ++u)
    for (std::size_t k = 0; k < spec.feature_dim; ++k)
      user_taste(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(k)) =
          spec.modality_noise * gaussian(rng);

  // cold users: truncated to exactly 5 interactions, chosen by shuffle
  const std::size_t n_cold =
      static_cast<std::size_t>(std::lround(spec.cold_fraction * static_cast<double>(spec.n_users)));
  std::vector<std::size_t> order(spec.n_users);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::set<std::size_t> cold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_cold));
  out.cold_users.assign(cold.begin(), cold.end());

  // timestamps: user base + per-user counter; slots below +500 are reserved
  // for coverage repairs so they land earliest (=> train split)
  constexpr std::int64_t kBase = 1000;
  constexpr std::int64_t kFirst = 500;


  // within-block choices follow the user's taste alignment with the item
  // latent deviations, so the planted preferences are recoverable from the
  // modality features; sqrt(d) undoes the high-dimensional cosine shrinkage
  const double sharpness = 2.0 * std::sqrt(static_cast<double>(spec.feature_dim));
  auto cosine = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double na = a.norm(), nb = b.norm();
    return na > 0 && nb > 0 ? a.dot(b) / (na * nb) : 0.0;
  };

  std::vector<std::set<std::size_t>> chosen(spec.n_users);
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    const std::size_t want = cold.count(u) ? 5 : spec.interactions_per_user;
    const std::size_t block = out.user_block[u];

    std::vector<double> weight(items_per_block);
    Eigen::VectorXd p = user_taste.row(static_cast<Eigen::Index>(u));
    for (std::size_t j = 0; j < items_per_block; ++j) {
      const auto v = block * items_per_block + j;
      Eigen::VectorXd dev =
          item_latent.row(static_cast<Eigen::Index>(v)) -
          centroids.row(static_cast<Eigen::Index>(out.item_block[v]));
      weight[j] = std::exp(sharpness * cosine(p, dev));
    }
    const double wsum = std::accumulate(weight.begin(), weight.end(), 0.0);

    std::vector<std::size_t> draw_order;
    while (chosen[u].size() < want) {
      std::size_t v;
      if (uniform(rng) < 0.9) {
        double ticket = uniform(rng) * wsum;
        std::size_t j = 0;
        while (j + 1 < items_per_block && ticket > weight[j]) ticket -= weight[j++];
        v = block * items_per_block + j;
      } else {
        v = uniform_index(rng, spec.n_items - items_per_block);
        if (v >= block * items_per_block) v += items_per_block;
      }
      if (chosen[u].insert(v).second) draw_order.push_back(v);
    }
    // consumption order is independent of affinity: preferences are stable
    // over time, so the chronological holdout stays preference-representative
    std::shuffle(draw_order.begin(), draw_order.end(), rng);
    for (std::size_t k = 0; k < draw_order.size(); ++k)
      out.table.records.push_back({u, draw_order[k],
                                   static_cast<std::int64_t>(u) * kBase + kFirst +
                                       static_cast<std::int64_t>(k)});
  }

  // repair pass: every item needs at least 2 train-split interactions or the
  // train-only Laplacian would see isolated nodes
  std::vector<std::int64_t> repair_slot(spec.n_users, kFirst - 1);
  for (int round = 0; round < 8; ++round) {
    SplitSpec split = chronological_split(out.table, spec.n_users);
    std::vector<std::size_t> train_count(spec.n_items, 0);
    for (std::size_t i : split.train) train_count[out.table.records[i].item]++;
    bool ok = true;
    for (std::size_t v = 0; v < spec.n_items; ++v) {
      while (train_count[v] < 2) {
        ok = false;
        const std::size_t block = out.item_block[v];
        std::size_t u;
        std::size_t guard = 0;
        do {
          u = block * users_per_block + uniform_index(rng, users_per_block);
          if (++guard > 10 * users_per_block)
            throw DataError("synth: cannot repair train coverage for item " + std::to_string(v));
        } while (cold.count(u) || chosen[u].count(v) || repair_slot[u] < 0);
        chosen[u].insert(v);
        out.table.records.push_back(
            {u, v, static_cast<std::int64_t>(u) * kBase + repair_slot[u]--});
        train_count[v]++;  // earliest timestamps always land in train
      }
    }
    if (ok) break;
  }

  // deterministic record order: by user, then time
  std::sort(out.table.records.begin(), out.table.records.end(),
            [](const Interaction& a, const Interaction& b) {
              if (a.user != b.user) return a.user < b.user;
              return a.timestamp < b.timestamp;
            });
  return out;
}

}  // namespace ssr
