#include "ssr/io.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace ssr {

namespace {

bool numeric_token(const std::string& s) {
  if (s.empty()) return false;
  std::size_t i = s[0] == '-' || s[0] == '+' ? 1 : 0;
  if (i == s.size()) return false;
  for (; i < s.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  return true;
}

void write_id_map(const std::string& path, const std::vector<std::string>& ids) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write sidecar " + path);
  for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << '\t' << i << '\n';
}

}  // namespace

LoadedInteractions load_interactions(const std::string& path, bool write_sidecars) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open interactions file " + path);

  LoadedInteractions out;
  std::unordered_map<std::string, std::size_t> user_map, item_map;
  // (user, item) -> record slot, for the earliest-timestamp dedup pass
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> seen;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string u, v, t;
    if (!std::getline(ss, u, '\t') || !std::getline(ss, v, '\t') || !std::getline(ss, t, '\t')) {
      if (line_no == 1) continue;  // tolerate a short header
      throw DataError(path + ":" + std::to_string(line_no) + ": expected 3 tab-separated columns");
    }
    if (line_no == 1 && !numeric_token(t)) continue;  // header row

    std::int64_t ts;
    try {
      ts = std::stoll(t);
    } catch (...) {
      throw DataError(path + ":" + std::to_string(line_no) + ": bad timestamp '" + t + "'");
    }
    if (ts < 0)
      throw DataError(path + ":" + std::to_string(line_no) + ": negative timestamp");

    auto [uit, unew] = user_map.emplace(u, out.user_ids.size());
    if (unew) out.user_ids.push_back(u);
    auto [vit, vnew] = item_map.emplace(v, out.item_ids.size());
    if (vnew) out.item_ids.push_back(v);

    const std::size_t ui = uit->second, vi = vit->second;
    auto key = std::make_pair(ui, vi);
    auto found = seen.find(key);
    if (found == seen.end()) {
      seen.emplace(key, out.table.records.size());
      out.table.records.push_back({ui, vi, ts});
    } else if (ts < out.table.records[found->second].timestamp) {
      out.table.records[found->second].timestamp = ts;
    }
  }
  if (out.table.records.empty()) throw DataError(path + ": no interaction records");

  if (write_sidecars) {
    write_id_map(path + ".users.tsv", out.user_ids);
    write_id_map(path + ".items.tsv", out.item_ids);
  }
  return out;
}

// ---------------------------------------------------------------------------

static constexpr char kFeatureMagic[8] = {'S', 'S', 'R', 'F', 'M', 'A', 'T', '1'};
static constexpr char kCheckpointMagic[8] = {'S', 'S', 'R', 'C', 'K', 'P', 'T', '1'};

Eigen::MatrixXd load_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kFeatureMagic, 8) != 0)
    throw DataError(path + ": bad magic at byte offset 0");
  std::uint32_t rows = 0, cols = 0;
  if (!in.read(reinterpret_cast<char*>(&rows), 4) || !in.read(reinterpret_cast<char*>(&cols), 4))
    throw DataError(path + ": truncated header at byte offset 8");

  Eigen::MatrixXd m(rows, cols);
  std::vector<float> buf(cols);
  for (std::uint32_t r = 0; r < rows; ++r) {
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(4 * cols))) {
      const std::size_t offset = 16 + 4ull * r * cols + static_cast<std::size_t>(in.gcount());
      throw DataError(path + ": truncated payload at byte offset " + std::to_string(offset));
    }
    for (std::uint32_t c = 0; c < cols; ++c) {
      if (!std::isfinite(buf[c])) {
        const std::size_t offset = 16 + 4ull * (static_cast<std::size_t>(r) * cols + c);
        throw DataError(path + ": non-finite value at byte offset " + std::to_string(offset));
      }
      m(r, c) = static_cast<double>(buf[c]);
    }
  }
  return m;
}

void write_features(const std::string& path, const Eigen::MatrixXd& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write feature file " + path);
  out.write(kFeatureMagic, 8);
  const std::uint32_t rows = static_cast<std::uint32_t>(m.rows());
  const std::uint32_t cols = static_cast<std::uint32_t>(m.cols());
  out.write(reinterpret_cast<const char*>(&rows), 4);
  out.write(reinterpret_cast<const char*>(&cols), 4);
  std::vector<float> buf(cols);
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) buf[c] = static_cast<float>(m(r, c));
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(4 * cols));
  }
}

Eigen::MatrixXd load_features_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open csv feature file " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (...) {
        throw DataError(path + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw DataError(path + ":" + std::to_string(line_no) + ": ragged row");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError(path + ": empty csv");
  Eigen::MatrixXd m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return m;
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const char* ws = " \t\"";
    auto b = s.find_first_not_of(ws);
    auto e = s.find_last_not_of(ws);
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected key = value");
    kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return kv;
}

std::map<std::string, std::string> config_to_map(const TrainConfig& cfg) {
  std::map<std::string, std::string> kv;
  auto num = [](double v) {
    std::ostringstream ss;
    ss << v;
    return ss.str();
  };
  kv["d"] = std::to_string(cfg.model.dim);
  kv["bands"] = std::to_string(cfg.model.bands);
  kv["cp_rank"] = std::to_string(cfg.model.cp_rank);
  kv["gate_hidden"] = std::to_string(cfg.model.gate_hidden);
  kv["leaky_slope"] = num(cfg.model.leaky_slope);
  kv["use_modalities"] = cfg.model.use_modalities ? "true" : "false";
  kv["shared_partition"] = cfg.model.shared_partition ? "true" : "false";
  kv["gate_mode"] = cfg.model.gate_mode;
  kv["pi"] = num(cfg.mask_rate);
  kv["lambda"] = num(cfg.lambda_sbm);
  kv["eta"] = num(cfg.eta_scr);
  kv["tau"] = num(cfg.tau);
  kv["lr"] = num(cfg.lr);
  kv["batch_size"] = std::to_string(cfg.batch_size);
  kv["negatives_per_positive"] = std::to_string(cfg.negatives_per_positive);
  kv["scr_negatives"] = std::to_string(cfg.scr_negatives);
  kv["sbm_samples"] = std::to_string(cfg.sbm_samples);
  kv["max_epochs"] = std::to_string(cfg.max_epochs);
  kv["patience"] = std::to_string(cfg.patience);
  kv["dense_limit"] = std::to_string(cfg.dense_limit);
  kv["k_trunc"] = std::to_string(cfg.k_trunc);
  kv["seed"] = std::to_string(cfg.seed);
  kv["train_only_graph"] = cfg.train_only_graph ? "true" : "false";
  return kv;
}

TrainConfig config_from_map(const std::map<std::string, std::string>& kv, TrainConfig cfg) {
  auto to_bool = [](const std::string& k, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw DataError("config: key '" + k + "' expects a boolean, got '" + v + "'");
  };
  for (const auto& [k, v] : kv) {
    try {
      if (k == "d") cfg.model.dim = std::stoul(v);
      else if (k == "bands") cfg.model.bands = std::stoul(v);
      else if (k == "cp_rank") cfg.model.cp_rank = std::stoul(v);
      else if (k == "gate_hidden") cfg.model.gate_hidden = std::stoul(v);
      else if (k == "leaky_slope") cfg.model.leaky_slope = std::stod(v);
      else if (k == "use_modalities") cfg.model.use_modalities = to_bool(k, v);
      else if (k == "shared_partition") cfg.model.shared_partition = to_bool(k, v);
      else if (k == "gate_mode") cfg.model.gate_mode = v;
      else if (k == "pi") cfg.mask_rate = std::stod(v);
      else if (k == "lambda") cfg.lambda_sbm = std::stod(v);
      else if (k == "eta") cfg.eta_scr = std::stod(v);
      else if (k == "tau") cfg.tau = std::stod(v);
      else if (k == "lr") cfg.lr = std::stod(v);
      else if (k == "batch_size") cfg.batch_size = std::stoul(v);
      else if (k == "negatives_per_positive") cfg.negatives_per_positive = std::stoul(v);
      else if (k == "scr_negatives") cfg.scr_negatives = std::stoul(v);
      else if (k == "sbm_samples") cfg.sbm_samples = std::stoul(v);
      else if (k == "max_epochs") cfg.max_epochs = std::stoul(v);
      else if (k == "patience") cfg.patience = std::stoul(v);
      else if (k == "dense_limit") cfg.dense_limit = std::stoul(v);
      else if (k == "k_trunc") cfg.k_trunc = std::stoul(v);
      else if (k == "seed") cfg.seed = std::stoull(v);
      else if (k == "train_only_graph") cfg.train_only_graph = to_bool(k, v);
      else throw DataError("config: unknown key '" + k + "'");
    } catch (const DataError&) {
      throw;
    } catch (...) {
      throw DataError("config: bad value for key '" + k + "': '" + v + "'");
    }
  }
  cfg.model.seed = cfg.seed;
  return cfg;
}

std::string config_hash(const TrainConfig& cfg) {
  std::string canon;
  for (const auto& [k, v] : config_to_map(cfg)) canon += k + "=" + v + "\n";
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : canon) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const SsrModel& model, const TrainConfig& cfg,
                     std::size_t n_users, std::size_t n_items, std::size_t best_epoch) {
  nlohmann::json header;
  header["version"] = 1;
  header["config"] = config_to_map(cfg);
  header["config_hash"] = config_hash(cfg);
  header["n_users"] = n_users;
  header["n_items"] = n_items;
  header["best_epoch"] = best_epoch;
  nlohmann::json parts = nlohmann::json::object();
  for (const auto& [name, part] : model.partitions()) {
    parts[name] = {{"boundaries", part.boundaries},
                   {"band_energy", part.band_energy},
                   {"residual_in_last", part.residual_in_last},
                   {"zero_energy_fallback", part.zero_energy_fallback}};
  }
  header["partitions"] = parts;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& name : model.params().names())
    tensors.push_back({{"name", name}, {"shape", model.params().get(name).shape}});
  header["tensors"] = tensors;

  const std::string js = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, 8);
  const std::uint32_t version = 1;
  const std::uint32_t len = static_cast<std::uint32_t>(js.size());
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(js.data(), static_cast<std::streamsize>(js.size()));
  for (const auto& name : model.params().names()) {
    const Tensor& t = model.params().get(name);
    std::vector<float> buf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t.data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(4 * buf.size()));
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError(path + ": bad checkpoint magic");
  std::uint32_t version = 0, len = 0;
  if (!in.read(reinterpret_cast<char*>(&version), 4) || !in.read(reinterpret_cast<char*>(&len), 4))
    throw DataError(path + ": truncated checkpoint header");
  if (version != 1) throw DataError(path + ": unsupported checkpoint version");
  std::string js(len, '\0');
  if (!in.read(js.data(), len)) throw DataError(path + ": truncated checkpoint header json");

  nlohmann::json header = nlohmann::json::parse(js, nullptr, false);
  if (header.is_discarded()) throw DataError(path + ": corrupt checkpoint header json");

  Checkpoint ckpt;
  std::map<std::string, std::string> kv = header.at("config");
  ckpt.config = config_from_map(kv);
  ckpt.n_users = header.at("n_users");
  ckpt.n_items = header.at("n_items");
  ckpt.best_epoch = header.at("best_epoch");
  for (auto it = header.at("partitions").begin(); it != header.at("partitions").end(); ++it) {
    BandPartition p;
    p.boundaries = it.value().at("boundaries").get<std::vector<std::size_t>>();
    p.band_energy = it.value().at("band_energy").get<std::vector<double>>();
    p.residual_in_last = it.value().at("residual_in_last");
    p.zero_energy_fallback = it.value().at("zero_energy_fallback");
    p.n_bands = p.boundaries.size() - 1;
    ckpt.partitions.emplace(it.key(), std::move(p));
  }
  for (const auto& t : header.at("tensors")) {
    Shape shape = t.at("shape").get<Shape>();
    Tensor tensor(shape);
    std::vector<float> buf(tensor.size());
    if (!in.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(4 * buf.size())))
      throw DataError(path + ": truncated tensor payload for " +
                      t.at("name").get<std::string>());
    for (std::size_t i = 0; i < buf.size(); ++i) tensor.data[i] = static_cast<double>(buf[i]);
    ckpt.tensors.emplace_back(t.at("name").get<std::string>(), std::move(tensor));
  }
  return ckpt;
}

RestoredModel restore_model(const Checkpoint& ckpt, const InteractionTable& table,
                            std::size_t n_users, std::size_t n_items,
                            const Eigen::MatrixXd& item_img, const Eigen::MatrixXd& item_txt) {
  if (n_users != ckpt.n_users || n_items != ckpt.n_items)
    throw DataError("restore: interaction data does not match checkpoint population (" +
                    std::to_string(n_users) + "x" + std::to_string(n_items) + " vs " +
                    std::to_string(ckpt.n_users) + "x" + std::to_string(ckpt.n_items) + ")");

  RestoredModel rm;
  rm.config = ckpt.config;
  rm.split = chronological_split(table, n_users);
  InteractionTable train_table;
  for (std::size_t i : rm.split.train) train_table.records.push_back(table.records[i]);
  if (!ckpt.config.train_only_graph) train_table = table;
  rm.graph = build_graph(train_table, n_users, n_items);

  EigendecomposeOptions eopts;
  eopts.dense_limit = ckpt.config.dense_limit;
  eopts.seed = ckpt.config.seed;
  SparseSymmetricMatrix laplacian = normalized_laplacian(rm.graph);
  rm.spectrum = rm.graph.n_nodes() <= ckpt.config.dense_limit
                    ? eigendecompose_full(laplacian, eopts)
                    : eigendecompose_truncated(laplacian, ckpt.config.k_trunc, eopts);

  Eigen::MatrixXd img, txt;
  if (ckpt.config.model.use_modalities) {
    img = propagate_features(rm.graph, item_img);
    txt = propagate_features(rm.graph, item_txt);
  }
  ModelConfig mc = ckpt.config.model;
  mc.seed = ckpt.config.seed;
  rm.model = std::make_unique<SsrModel>(rm.graph, rm.spectrum, std::move(img), std::move(txt), mc,
                                        ckpt.partitions);
  for (const auto& [name, tensor] : ckpt.tensors) {
    Tensor& dst = rm.model->params().get(name);
    if (dst.shape != tensor.shape)
      throw DataError("restore: tensor '" + name + "' shape mismatch");
    dst = tensor;
  }

  rm.train_items.assign(n_users, {});
  rm.train_counts.assign(n_users, 0);
  for (std::size_t i : rm.split.train) {
    rm.train_items[table.records[i].user].insert(table.records[i].item);
    rm.train_counts[table.records[i].user]++;
  }
  return rm;
}

}  // namespace ssr
