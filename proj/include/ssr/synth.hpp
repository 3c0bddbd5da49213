#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "ssr/graph.hpp"

namespace ssr {

/// Planted-preference generator: users and items are split into blocks, 90%
/// of interactions stay within a user's block, modality features are the
/// block centroid (shared between img and txt) plus Gaussian noise.
struct SyntheticSpec {
  std::size_t n_users = 400;
  std::size_t n_items = 200;
  std::size_t n_blocks = 4;
  std::size_t interactions_per_user = 12;
  std::size_t feature_dim = 32;
  double modality_noise = 0.5;  // sigma
  double cold_fraction = 0.2;   // users truncated to 5 interactions
  std::uint64_t seed = 42;

  void validate() const;
};

struct SyntheticData {
  InteractionTable table;
  Eigen::MatrixXd img_features;  // n_items x feature_dim
  Eigen::MatrixXd txt_features;
  std::vector<std::size_t> user_block;
  std::vector<std::size_t> item_block;
  std::vector<std::size_t> cold_users;
};

SyntheticData synth_generate(const SyntheticSpec& spec);

}  // namespace ssr
