#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ssr/error.hpp"
#include "ssr/evaluator.hpp"
#include "ssr/io.hpp"
#include "ssr/objective.hpp"
#include "ssr/synth.hpp"
#include "ssr/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct DataPaths {
  std::string interactions, img, txt;
  bool csv = false;
};

struct LoadedData {
  ssr::LoadedInteractions inter;
  Eigen::MatrixXd img, txt;
};

LoadedData load_data(const DataPaths& p, bool need_modalities) {
  LoadedData d;
  d.inter = ssr::load_interactions(p.interactions, /*write_sidecars=*/true);
  if (need_modalities) {
    d.img = p.csv ? ssr::load_features_csv(p.img) : ssr::load_features(p.img);
    d.txt = p.csv ? ssr::load_features_csv(p.txt) : ssr::load_features(p.txt);
    if (static_cast<std::size_t>(d.img.rows()) != d.inter.n_items() ||
        static_cast<std::size_t>(d.txt.rows()) != d.inter.n_items())
      throw ssr::DataError("feature rows do not match the item population");
  }
  return d;
}

json metrics_to_json(const ssr::RankingMetrics& m) {
  json j;
  for (const auto& [k, v] : m.recall) j["recall"][std::to_string(k)] = v;
  for (const auto& [k, v] : m.ndcg) j["ndcg"][std::to_string(k)] = v;
  j["n_users"] = m.n_users_evaluated;
  return j;
}

std::vector<std::size_t> parse_ks(const std::string& spec) {
  std::vector<std::size_t> ks;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    ks.push_back(std::stoul(tok));
  }
  if (ks.empty()) throw ssr::UsageError("--k needs at least one cutoff");
  return ks;
}

int cmd_synth(const ssr::SyntheticSpec& spec, const std::string& out_dir) {
  ssr::SyntheticData data = ssr::synth_generate(spec);
  fs::create_directories(out_dir);

  std::ofstream tsv(fs::path(out_dir) / "interactions.tsv", std::ios::binary);
  tsv << "user_id\titem_id\ttimestamp\n";
  for (const auto& r : data.table.records)
    tsv << r.user << '\t' << r.item << '\t' << r.timestamp << '\n';

  ssr::write_features((fs::path(out_dir) / "img_features.bin").string(), data.img_features);
  ssr::write_features((fs::path(out_dir) / "txt_features.bin").string(), data.txt_features);

  std::ofstream blocks(fs::path(out_dir) / "blocks.tsv", std::ios::binary);
  blocks << "kind\tid\tblock\n";
  for (std::size_t u = 0; u < data.user_block.size(); ++u)
    blocks << "user\t" << u << '\t' << data.user_block[u] << '\n';
  for (std::size_t v = 0; v < data.item_block.size(); ++v)
    blocks << "item\t" << v << '\t' << data.item_block[v] << '\n';

  std::cout << "wrote " << data.table.records.size() << " interactions, "
            << data.img_features.rows() << " item feature rows to " << out_dir << "\n";
  return 0;
}

int cmd_train(const DataPaths& paths, const std::string& config_path, const std::string& out_dir) {
  ssr::TrainConfig cfg;
  if (!config_path.empty()) cfg = ssr::config_from_map(ssr::parse_config_file(config_path));
  LoadedData d = load_data(paths, cfg.model.use_modalities);

  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "training_log.jsonl", std::ios::binary);

  ssr::Trainer trainer(d.inter.table, d.inter.n_users(), d.inter.n_items(), d.img, d.txt, cfg);
  auto outcome = trainer.run([&](const ssr::EpochLog& e) {
    json j{{"epoch", e.epoch},     {"bce", e.loss.bce},     {"sbm", e.loss.sbm},
           {"scr", e.loss.scr},    {"total", e.loss.total}, {"wall_ms", e.wall_ms}};
    log << j.dump() << "\n";
    log.flush();
    std::cerr << "epoch " << e.epoch << " total=" << e.loss.total
              << " val_r20=" << e.val_recall20 << "\n";
  });

  const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.ssr").string();
  ssr::save_checkpoint(ckpt_path, trainer.model(), cfg, d.inter.n_users(), d.inter.n_items(),
                       outcome.best_epoch);

  // evaluate the persisted checkpoint so `train` and `evaluate` agree bit-wise
  ssr::Checkpoint ckpt = ssr::load_checkpoint(ckpt_path);
  ssr::RestoredModel rm =
      ssr::restore_model(ckpt, d.inter.table, d.inter.n_users(), d.inter.n_items(), d.img, d.txt);
  ssr::Tensor emb = rm.model->node_embeddings();
  auto relevant = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::set<std::size_t>> rel(d.inter.n_users());
    for (std::size_t i : idx)
      rel[d.inter.table.records[i].user].insert(d.inter.table.records[i].item);
    return rel;
  };
  ssr::RankingMetrics test = ssr::evaluate_ranking(emb, d.inter.n_users(), d.inter.n_items(),
                                                   rm.train_items, relevant(rm.split.test),
                                                   {10, 20});
  json out = metrics_to_json(test);
  out["split"] = "test";
  out["best_epoch"] = outcome.best_epoch;
  std::ofstream mf(fs::path(out_dir) / "metrics.json", std::ios::binary);
  mf << out.dump(2) << "\n";
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_evaluate(const DataPaths& paths, const std::string& ckpt_path, const std::string& split,
                 bool cold_start, const std::string& k_spec, const std::string& out_file) {
  ssr::Checkpoint ckpt = ssr::load_checkpoint(ckpt_path);
  LoadedData d = load_data(paths, ckpt.config.model.use_modalities);
  ssr::RestoredModel rm =
      ssr::restore_model(ckpt, d.inter.table, d.inter.n_users(), d.inter.n_items(), d.img, d.txt);

  const auto& idx = split == "val" ? rm.split.val : rm.split.test;
  std::vector<std::set<std::size_t>> relevant(d.inter.n_users());
  for (std::size_t i : idx)
    relevant[d.inter.table.records[i].user].insert(d.inter.table.records[i].item);

  ssr::Tensor emb = rm.model->node_embeddings();
  std::vector<std::size_t> ks = parse_ks(k_spec);
  ssr::RankingMetrics m = ssr::evaluate_ranking(emb, d.inter.n_users(), d.inter.n_items(),
                                                rm.train_items, relevant, ks);
  json out = metrics_to_json(m);
  out["split"] = split;
  if (cold_start) {
    auto cold = ssr::cold_start_filter(rm.train_counts);
    ssr::RankingMetrics mc = ssr::evaluate_ranking(emb, d.inter.n_users(), d.inter.n_items(),
                                                   rm.train_items, relevant, ks, &cold);
    out["cold_start"] = metrics_to_json(mc);
  }
  std::cout << out.dump(2) << "\n";
  if (!out_file.empty()) {
    std::ofstream f(out_file, std::ios::binary);
    f << out.dump(2) << "\n";
  }
  return 0;
}

int cmd_decompose(const DataPaths& paths, const std::string& config_path,
                  const std::string& out_csv) {
  ssr::TrainConfig cfg;
  if (!config_path.empty()) cfg = ssr::config_from_map(ssr::parse_config_file(config_path));
  LoadedData d = load_data(paths, cfg.model.use_modalities);
  ssr::Trainer trainer(d.inter.table, d.inter.n_users(), d.inter.n_items(), d.img, d.txt, cfg);

  const ssr::Spectrum& spec = trainer.spectrum();
  std::ofstream csv(out_csv, std::ios::binary);
  if (!csv) throw ssr::DataError("cannot write " + out_csv);
  csv << "modality,band,n_modes,eigenvalue_lo,eigenvalue_hi,energy,energy_fraction\n";
  auto signals = trainer.model().projected_signals();
  for (const auto& [name, sig] : signals) {
    const ssr::BandPartition& part = trainer.model().partitions().at(name);
    const double total = sig.squaredNorm();
    double retained = 0.0;
    for (double e : part.band_energy) retained += e;
    for (std::size_t m = 0; m < part.n_bands; ++m) {
      double energy = part.band_energy[m];
      if (m + 1 == part.n_bands && part.residual_in_last) energy += total - retained;
      const std::size_t lo = part.band_begin(m);
      const std::size_t hi = part.band_end(m);
      csv << name << ',' << (m + 1) << ',' << (hi - lo) << ','
          << spec.eigenvalues(static_cast<Eigen::Index>(lo)) << ','
          << spec.eigenvalues(static_cast<Eigen::Index>(hi - 1)) << ',' << energy << ','
          << (total > 0 ? energy / total : 0.0) << "\n";
    }
  }
  std::cout << "band report written to " << out_csv << "\n";
  return 0;
}

int cmd_diagnose(const DataPaths& paths, const std::string& ckpt_path, const std::string& out_dir,
                 const std::string& metric) {
  ssr::Checkpoint ckpt = ssr::load_checkpoint(ckpt_path);
  LoadedData d = load_data(paths, ckpt.config.model.use_modalities);
  ssr::RestoredModel rm =
      ssr::restore_model(ckpt, d.inter.table, d.inter.n_users(), d.inter.n_items(), d.img, d.txt);
  fs::create_directories(out_dir);

  ssr::BandStack stack = rm.model->current_band_stack();

  {  // per-band energies of the current parameters
    std::ofstream csv(fs::path(out_dir) / "band_energy.csv", std::ios::binary);
    csv << "modality,band,energy\n";
    for (std::size_t i = 0; i < stack.components.size(); ++i)
      csv << stack.band_axis_map[i].first << ',' << stack.band_axis_map[i].second << ','
          << stack.components[i].squaredNorm() << "\n";
  }

  {  // modality center distances
    ssr::CenterDistances cd = ssr::modality_center_distances(stack, d.inter.n_users(), metric);
    std::ofstream csv(fs::path(out_dir) / "center_distances.csv", std::ios::binary);
    csv << "band,modality_a,modality_b,distance\n";
    for (std::size_t m = 0; m < cd.per_band.size(); ++m)
      for (std::size_t i = 0; i < cd.modalities.size(); ++i)
        for (std::size_t j = 0; j < cd.modalities.size(); ++j)
          csv << (m + 1) << ',' << cd.modalities[i] << ',' << cd.modalities[j] << ','
              << cd.per_band[m](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))
              << "\n";
  }

  {  // fused gate weights, tagged cold / non-cold
    ssr::Tape tape;
    auto fwd = rm.model->forward(tape);
    const ssr::Tensor& alpha = tape.value(fwd.head.alpha);
    std::vector<std::set<std::size_t>> relevant(d.inter.n_users());
    for (std::size_t i : rm.split.test)
      relevant[d.inter.table.records[i].user].insert(d.inter.table.records[i].item);
    std::vector<std::size_t> users;
    for (std::size_t u = 0; u < d.inter.n_users(); ++u)
      if (!relevant[u].empty()) users.push_back(u);
    auto cold_vec = ssr::cold_start_filter(rm.train_counts);
    std::set<std::size_t> cold(cold_vec.begin(), cold_vec.end());
    auto rows = ssr::gate_distribution_export(alpha, d.inter.n_users(), users, cold);
    std::ofstream csv(fs::path(out_dir) / "gate_weights.csv", std::ios::binary);
    csv << "user,band,alpha,cold\n";
    for (const auto& r : rows)
      csv << r.user << ',' << r.band << ',' << r.alpha << ',' << (r.cold ? 1 : 0) << "\n";
  }

  std::cout << "diagnostics written to " << out_dir << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double eps, double tol, bool as_json) {
  // self-contained desk fixture: ~30 nodes, M=2, r=2, d=8
  ssr::SyntheticSpec sspec;
  sspec.n_users = 18;
  sspec.n_items = 12;
  sspec.n_blocks = 1;
  sspec.interactions_per_user = 6;
  sspec.feature_dim = 10;
  sspec.modality_noise = 0.5;
  sspec.cold_fraction = 0.0;
  sspec.seed = seed;
  ssr::SyntheticData data = ssr::synth_generate(sspec);

  ssr::TrainConfig cfg;
  cfg.model.dim = 8;
  cfg.model.bands = 2;
  cfg.model.cp_rank = 2;
  cfg.model.gate_hidden = 8;
  cfg.seed = seed;
  cfg.model.seed = seed;
  ssr::Trainer trainer(data.table, sspec.n_users, sspec.n_items, data.img_features,
                       data.txt_features, cfg);
  ssr::SsrModel& model = trainer.model();

  ssr::Rng rng(ssr::derive_seed(seed, 0xabcd));
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<int> labels;
  std::vector<std::size_t> items;
  for (std::size_t i = 0; i < std::min<std::size_t>(24, trainer.split().train.size()); ++i) {
    const auto& rec = data.table.records[trainer.split().train[i]];
    pairs.emplace_back(rec.user, rec.item);
    labels.push_back(1);
    items.push_back(rec.item);
    std::size_t neg;
    ssr::sample_negative(trainer.train_items_by_user()[rec.user], sspec.n_items, rng, neg);
    pairs.emplace_back(rec.user, neg);
    labels.push_back(0);
  }
  ssr::MaskSample mask = ssr::sample_band_mask(model.extended_bands(), 0.3, rng);
  ssr::ScrPlan plan = ssr::make_scr_plan(items, cfg.model.bands, cfg.scr_negatives,
                                         sspec.n_items, rng);

  // stats are stop-gradient inputs: capture them once, outside the program
  ssr::Tensor stats_full, stats_masked;
  {
    ssr::Tape t;
    auto bands = model.band_components(t);
    stats_full = model.band_stats(t.value(model.assemble_stack(t, bands, nullptr)));
    stats_masked = model.band_stats(t.value(model.assemble_stack(t, bands, &mask)));
  }

  auto program = [&](ssr::Tape& tape, const ssr::ParamStore&) -> ssr::ValueId {
    auto bands = model.band_components(tape);
    ssr::ValueId stack_full = model.assemble_stack(tape, bands, nullptr);
    auto head_full = model.head(tape, stack_full, &stats_full);
    ssr::ValueId logits = model.pair_logits(tape, head_full.embeddings, pairs);
    ssr::ValueId loss = ssr::bce_from_logits(tape, logits, labels);

    ssr::ValueId stack_masked = model.assemble_stack(tape, bands, &mask);
    auto head_masked = model.head(tape, stack_masked, &stats_masked);
    ssr::ValueId masked_logits = model.pair_logits(tape, head_masked.embeddings, pairs);
    ssr::ValueId sbm = ssr::sbm_from_scores(tape, tape.sigmoid(logits),
                                            tape.sigmoid(masked_logits));
    loss = tape.add(loss, tape.mul(sbm, tape.constant(ssr::Tensor::scalar(cfg.lambda_sbm))));

    ssr::ValueId scr = ssr::scr_from_plan_taped(tape, bands, model.band_axis_map(), plan, cfg.tau,
                                                sspec.n_users);
    return tape.add(loss, tape.mul(scr, tape.constant(ssr::Tensor::scalar(cfg.eta_scr))));
  };

  ssr::GradCheckReport report = ssr::grad_check(program, model.params(), eps, tol, 200, seed);

  json j;
  j["eps"] = eps;
  j["tol"] = tol;
  j["pass"] = report.pass;
  j["tensors"] = json::array();
  for (const auto& e : report.tensors)
    j["tensors"].push_back({{"tensor", e.tensor},
                            {"max_rel_err", e.max_rel_err},
                            {"checked", e.checked},
                            {"worst_coord", e.worst_coord},
                            {"pass", e.pass}});
  if (as_json)
    std::cout << j.dump(2) << "\n";
  else
    std::cout << j.dump(2) << "\n";
  return report.pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frequency-aware multimodal graph recommender"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a planted-preference dataset");
  ssr::SyntheticSpec sspec;
  std::string synth_out;
  synth->add_option("--users", sspec.n_users, "number of users");
  synth->add_option("--items", sspec.n_items, "number of items");
  synth->add_option("--blocks", sspec.n_blocks, "number of preference blocks");
  synth->add_option("--interactions", sspec.interactions_per_user, "interactions per user");
  synth->add_option("--feature-dim", sspec.feature_dim, "modality feature dimension");
  synth->add_option("--sigma", sspec.modality_noise, "feature noise");
  synth->add_option("--cold-fraction", sspec.cold_fraction, "fraction of cold users");
  synth->add_option("--seed", sspec.seed, "rng seed");
  synth->add_option("--out", synth_out, "output directory")->required();

  // shared data flags
  auto add_data_flags = [](CLI::App* cmd, DataPaths& p, bool need_features) {
    cmd->add_option("--interactions", p.interactions, "interactions TSV")->required();
    auto* img = cmd->add_option("--img-features", p.img, "image feature file");
    auto* txt = cmd->add_option("--txt-features", p.txt, "text feature file");
    cmd->add_flag("--csv", p.csv, "feature files are CSV instead of binary");
    if (need_features) {
      img->required();
      txt->required();
    }
  };

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  DataPaths train_paths;
  std::string train_config, train_out;
  add_data_flags(train, train_paths, true);
  train->add_option("--config", train_config, "flat key=value config file");
  train->add_option("--out", train_out, "output directory")->required();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  DataPaths eval_paths;
  std::string eval_ckpt, eval_split = "test", eval_ks = "10,20", eval_out;
  bool eval_cold = false;
  add_data_flags(eval, eval_paths, true);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
  eval->add_option("--split", eval_split, "test|val")
      ->check(CLI::IsMember({"test", "val"}));
  eval->add_flag("--cold-start", eval_cold, "also report the cold-start user slice");
  eval->add_option("--k", eval_ks, "comma-separated cutoffs");
  eval->add_option("--out", eval_out, "also write metrics JSON here");

  // decompose
  auto* dec = app.add_subcommand("decompose", "Emit the spectral band report");
  DataPaths dec_paths;
  std::string dec_config, dec_out;
  add_data_flags(dec, dec_paths, true);
  dec->add_option("--config", dec_config, "flat key=value config file");
  dec->add_option("--out", dec_out, "output CSV path")->required();

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "Emit diagnostics CSVs from a checkpoint");
  DataPaths diag_paths;
  std::string diag_ckpt, diag_out, diag_metric = "euclidean";
  add_data_flags(diag, diag_paths, true);
  diag->add_option("--checkpoint", diag_ckpt, "checkpoint path")->required();
  diag->add_option("--out", diag_out, "output directory")->required();
  diag->add_option("--metric", diag_metric, "euclidean|cosine")
      ->check(CLI::IsMember({"euclidean", "cosine"}));

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full loss");
  std::uint64_t gc_seed = 42;
  double gc_eps = 1e-4, gc_tol = 1e-4;
  gc->add_option("--seed", gc_seed, "rng seed");
  gc->add_option("--eps", gc_eps, "central difference step");
  gc->add_option("--tol", gc_tol, "relative error tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(sspec, synth_out);
    if (train->parsed()) return cmd_train(train_paths, train_config, train_out);
    if (eval->parsed())
      return cmd_evaluate(eval_paths, eval_ckpt, eval_split, eval_cold, eval_ks, eval_out);
    if (dec->parsed()) return cmd_decompose(dec_paths, dec_config, dec_out);
    if (diag->parsed()) return cmd_diagnose(diag_paths, diag_ckpt, diag_out, diag_metric);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_eps, gc_tol, true);
  } catch (const ssr::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ssr::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const ssr::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
