#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ssr/graph.hpp"
#include "ssr/model.hpp"
#include "ssr/spectral.hpp"
#include "ssr/trainer.hpp"

namespace ssr {

struct LoadedInteractions {
  InteractionTable table;
  std::vector<std::string> user_ids;  // dense index -> raw id
  std::vector<std::string> item_ids;

  std::size_t n_users() const { return user_ids.size(); }
  std::size_t n_items() const { return item_ids.size(); }
};

/// UTF-8 TSV `user<TAB>item<TAB>timestamp`; a header row is detected by a
/// non-numeric first token. Raw string ids are remapped to dense indices in
/// first-appearance order; duplicate (user, item) pairs keep the earliest
/// timestamp. When `write_sidecars` is set, the remaps are persisted next to
/// the input as two-column TSVs (`<path>.users.tsv`, `<path>.items.tsv`).
LoadedInteractions load_interactions(const std::string& path, bool write_sidecars = false);

// --- binary feature matrices -------------------------------------------------

/// Container: 8-byte magic "SSRFMAT1", u32 LE rows, u32 LE cols, row-major
/// float32 payload. Rejects magic mismatch, truncation and non-finite values
/// with the offending byte offset.
Eigen::MatrixXd load_features(const std::string& path);
void write_features(const std::string& path, const Eigen::MatrixXd& m);

/// Plain CSV fallback for small fixtures.
Eigen::MatrixXd load_features_csv(const std::string& path);

// --- config ------------------------------------------------------------------

/// Flat `key = value` file, '#' comments.
std::map<std::string, std::string> parse_config_file(const std::string& path);

/// Applies keys onto defaults; unknown keys are rejected.
TrainConfig config_from_map(const std::map<std::string, std::string>& kv,
                            TrainConfig base = {});

/// Canonical serialization (sorted keys) used for hashing and checkpoints.
std::map<std::string, std::string> config_to_map(const TrainConfig& cfg);
std::string config_hash(const TrainConfig& cfg);

// --- checkpoints ---------------------------------------------------------------

/// Versioned container: 8-byte magic "SSRCKPT1", u32 version, u32 JSON header
/// length, JSON header (shapes, config, band partitions), then raw
/// little-endian float32 tensors in header order.
void save_checkpoint(const std::string& path, const SsrModel& model, const TrainConfig& cfg,
                     std::size_t n_users, std::size_t n_items, std::size_t best_epoch);

struct Checkpoint {
  TrainConfig config;
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t best_epoch = 0;
  std::map<std::string, BandPartition> partitions;
  std::vector<std::pair<std::string, Tensor>> tensors;  // header order
};

Checkpoint load_checkpoint(const std::string& path);

/// Rebuilds the model around the checkpoint: recomputes the spectrum from the
/// (train-split) graph, restores the stored partitions and overwrites the
/// parameters.
struct RestoredModel {
  TrainConfig config;
  SplitSpec split;
  BipartiteGraph graph;
  Spectrum spectrum;
  std::unique_ptr<SsrModel> model;
  std::vector<std::set<std::size_t>> train_items;
  std::vector<std::size_t> train_counts;
};

RestoredModel restore_model(const Checkpoint& ckpt, const InteractionTable& table,
                            std::size_t n_users, std::size_t n_items,
                            const Eigen::MatrixXd& item_img, const Eigen::MatrixXd& item_txt);

}  // namespace ssr
