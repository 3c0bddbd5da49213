#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ssr/io.hpp"
#include "ssr/synth.hpp"
#include "test_util.hpp"

using namespace ssr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("ssr_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
  static inline int counter = 0;
};

}  // namespace

TEST_CASE("interaction TSV loading") {
  TempDir dir;
  SUBCASE("header detection, remap in first-appearance order, dedup keeps earliest") {
    std::ofstream f(dir.file("a.tsv"));
    f << "user_id\titem_id\ttimestamp\n";
    f << "alice\tbook\t100\n";
    f << "bob\tbook\t50\n";
    f << "alice\tpen\t70\n";
    f << "alice\tbook\t30\n";  // duplicate pair, earlier timestamp wins
    f.close();
    LoadedInteractions li = load_interactions(dir.file("a.tsv"), true);
    CHECK(li.n_users() == 2);
    CHECK(li.n_items() == 2);
    CHECK(li.user_ids == std::vector<std::string>{"alice", "bob"});
    CHECK(li.item_ids == std::vector<std::string>{"book", "pen"});
    REQUIRE(li.table.records.size() == 3);
    CHECK(li.table.records[0].timestamp == 30);  // deduped to the earliest

    std::ifstream sidecar(dir.file("a.tsv") + ".users.tsv");
    std::string line;
    std::getline(sidecar, line);
    CHECK(line == "alice\t0");
  }
  SUBCASE("headerless numeric file loads directly") {
    std::ofstream f(dir.file("b.tsv"));
    f << "0\t0\t1\n1\t0\t2\n";
    f.close();
    LoadedInteractions li = load_interactions(dir.file("b.tsv"));
    CHECK(li.table.records.size() == 2);
  }
  SUBCASE("negative timestamp and malformed rows rejected") {
    std::ofstream f(dir.file("c.tsv"));
    f << "0\t0\t-5\n";
    f.close();
    CHECK_THROWS_AS(load_interactions(dir.file("c.tsv")), DataError);
    std::ofstream g(dir.file("d.tsv"));
    g << "0\t0\t1\n0\t1\n";
    g.close();
    CHECK_THROWS_WITH_AS(load_interactions(dir.file("d.tsv")), doctest::Contains(":2"),
                         DataError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_interactions(dir.file("nope.tsv")), DataError);
  }
}

TEST_CASE("feature container roundtrip and corruption errors") {
  TempDir dir;
  Rng rng(1);
  SUBCASE("roundtrip is bit-exact at float32") {
    Eigen::MatrixXd m(2, 3);
    m << 0, 0, 0, 1.5, -2.25, 42.0;
    write_features(dir.file("f.bin"), m);
    Eigen::MatrixXd back = load_features(dir.file("f.bin"));
    CHECK(back.rows() == 2);
    CHECK(back.cols() == 3);
    CHECK((back - m).norm() == 0.0);

    write_features(dir.file("z.bin"), Eigen::MatrixXd::Zero(2, 3));
    CHECK(load_features(dir.file("z.bin")).norm() == 0.0);
  }
  SUBCASE("payload one float short reports the byte offset") {
    Eigen::MatrixXd m = testutil::random_matrix(3, 2, rng);
    write_features(dir.file("g.bin"), m);
    auto size = fs::file_size(dir.file("g.bin"));
    fs::resize_file(dir.file("g.bin"), size - 4);
    CHECK_THROWS_WITH_AS(load_features(dir.file("g.bin")), doctest::Contains("byte offset"),
                         DataError);
  }
  SUBCASE("magic mismatch reported at offset 0") {
    std::ofstream f(dir.file("h.bin"), std::ios::binary);
    f << "NOTMAGICI AM NOT A FEATURE FILE";
    f.close();
    CHECK_THROWS_WITH_AS(load_features(dir.file("h.bin")), doctest::Contains("offset 0"),
                         DataError);
  }
  SUBCASE("non-finite payload rejected with its offset") {
    std::ofstream f(dir.file("i.bin"), std::ios::binary);
    f.write("SSRFMAT1", 8);
    std::uint32_t rows = 1, cols = 2;
    f.write(reinterpret_cast<char*>(&rows), 4);
    f.write(reinterpret_cast<char*>(&cols), 4);
    float vals[2] = {1.0f, std::numeric_limits<float>::infinity()};
    f.write(reinterpret_cast<char*>(vals), 8);
    f.close();
    CHECK_THROWS_WITH_AS(load_features(dir.file("i.bin")), doctest::Contains("20"), DataError);
  }
  SUBCASE("csv fallback") {
    std::ofstream f(dir.file("j.csv"));
    f << "1.5,2\n3,4\n";
    f.close();
    Eigen::MatrixXd m = load_features_csv(dir.file("j.csv"));
    CHECK(m(0, 0) == 1.5);
    CHECK(m(1, 1) == 4.0);
    std::ofstream g(dir.file("k.csv"));
    g << "1,2\n3\n";
    g.close();
    CHECK_THROWS_AS(load_features_csv(dir.file("k.csv")), DataError);
  }
}

TEST_CASE("config file parsing and canonical hashing") {
  TempDir dir;
  std::ofstream f(dir.file("c.cfg"));
  f << "# training setup\n";
  f << "d = 32\n";
  f << "bands = 3\n";
  f << "lr = 0.0005\n";
  f << "pi = 0.25\n";
  f << "use_modalities = true\n";
  f << "seed = 7\n";
  f.close();
  TrainConfig cfg = config_from_map(parse_config_file(dir.file("c.cfg")));
  CHECK(cfg.model.dim == 32);
  CHECK(cfg.model.bands == 3);
  CHECK(cfg.lr == doctest::Approx(0.0005));
  CHECK(cfg.mask_rate == doctest::Approx(0.25));
  CHECK(cfg.seed == 7);
  CHECK(cfg.model.seed == 7);

  // hash is canonical and sensitive to values
  TrainConfig other = cfg;
  CHECK(config_hash(cfg) == config_hash(other));
  other.lr = 0.001;
  CHECK(config_hash(cfg) != config_hash(other));

  std::ofstream g(dir.file("bad.cfg"));
  g << "unknown_knob = 1\n";
  g.close();
  CHECK_THROWS_WITH_AS(config_from_map(parse_config_file(dir.file("bad.cfg"))),
                       doctest::Contains("unknown_knob"), DataError);
}

TEST_CASE("synthetic generator") {
  SyntheticSpec spec;
  spec.n_users = 100;
  spec.n_items = 40;
  spec.n_blocks = 4;
  spec.interactions_per_user = 8;
  spec.feature_dim = 6;
  spec.modality_noise = 0.0;
  spec.cold_fraction = 0.2;
  spec.seed = 42;

  SUBCASE("sigma = 0 gives identical features within a block") {
    SyntheticData d = synth_generate(spec);
    for (std::size_t v = 1; v < spec.n_items; ++v) {
      if (d.item_block[v] != d.item_block[v - 1]) continue;
      CHECK((d.img_features.row(static_cast<Eigen::Index>(v)) -
             d.img_features.row(static_cast<Eigen::Index>(v - 1)))
                .norm() == 0.0);
    }
    // shared centroids: img == txt exactly at sigma = 0
    CHECK((d.img_features - d.txt_features).norm() == 0.0);
  }

  SUBCASE("cold_fraction 0.2 of 100 users gives exactly 20 users with <= 5 interactions") {
    SyntheticData d = synth_generate(spec);
    std::map<std::size_t, std::size_t> counts;
    for (const auto& r : d.table.records) counts[r.user]++;
    std::size_t cold = 0;
    for (const auto& [u, c] : counts)
      if (c <= 5) ++cold;
    CHECK(cold == 20);
    CHECK(d.cold_users.size() == 20);
  }

  SUBCASE("fixed seed reproduces identical datasets") {
    SyntheticData a = synth_generate(spec);
    SyntheticData b = synth_generate(spec);
    REQUIRE(a.table.records.size() == b.table.records.size());
    for (std::size_t i = 0; i < a.table.records.size(); ++i) {
      CHECK(a.table.records[i].user == b.table.records[i].user);
      CHECK(a.table.records[i].item == b.table.records[i].item);
      CHECK(a.table.records[i].timestamp == b.table.records[i].timestamp);
    }
    CHECK((a.img_features - b.img_features).norm() == 0.0);
  }

  SUBCASE("timestamps strictly increase per user; interactions mostly in-block") {
    SyntheticData d = synth_generate(spec);
    std::map<std::size_t, std::int64_t> last;
    std::size_t in_block = 0;
    for (const auto& r : d.table.records) {
      if (last.count(r.user)) CHECK(r.timestamp > last[r.user]);
      last[r.user] = r.timestamp;
      if (d.user_block[r.user] == d.item_block[r.item]) ++in_block;
    }
    CHECK(static_cast<double>(in_block) / d.table.records.size() > 0.8);
  }

  SUBCASE("every item reaches the train split at least twice") {
    SyntheticData d = synth_generate(spec);
    SplitSpec split = chronological_split(d.table, spec.n_users);
    std::vector<std::size_t> train_count(spec.n_items, 0);
    for (std::size_t i : split.train) train_count[d.table.records[i].item]++;
    for (std::size_t v = 0; v < spec.n_items; ++v) CHECK(train_count[v] >= 2);
  }

  SUBCASE("infeasible specs are rejected") {
    SyntheticSpec bad = spec;
    bad.interactions_per_user = 11;  // block size is 10
    CHECK_THROWS_AS(synth_generate(bad), DataError);
    bad = spec;
    bad.n_blocks = 3;  // does not divide 100
    CHECK_THROWS_AS(synth_generate(bad), DataError);
  }
}

TEST_CASE("checkpoint save/load/restore") {
  TempDir dir;
  SyntheticSpec spec;
  spec.n_users = 20;
  spec.n_items = 12;
  spec.n_blocks = 2;
  spec.interactions_per_user = 6;
  spec.feature_dim = 5;
  spec.modality_noise = 0.4;
  spec.cold_fraction = 0.0;
  spec.seed = 3;
  SyntheticData data = synth_generate(spec);

  TrainConfig cfg;
  cfg.model.dim = 6;
  cfg.model.bands = 2;
  cfg.model.cp_rank = 2;
  cfg.model.gate_hidden = 4;
  cfg.batch_size = 32;
  cfg.seed = 13;
  cfg.model.seed = 13;
  Trainer trainer(data.table, spec.n_users, spec.n_items, data.img_features, data.txt_features,
                  cfg);
  trainer.train_epoch();

  const std::string path = dir.file("model.ssr");
  save_checkpoint(path, trainer.model(), cfg, spec.n_users, spec.n_items, 1);
  Checkpoint ckpt = load_checkpoint(path);
  CHECK(ckpt.n_users == spec.n_users);
  CHECK(ckpt.best_epoch == 1);
  CHECK(config_hash(ckpt.config) == config_hash(cfg));
  CHECK(ckpt.partitions.size() == 3);

  RestoredModel rm = restore_model(ckpt, data.table, spec.n_users, spec.n_items,
                                   data.img_features, data.txt_features);
  // restored parameters equal the saved ones at float32 precision
  for (const auto& [name, tensor] : ckpt.tensors) {
    const Tensor& orig = trainer.model().params().get(name);
    const Tensor& rest = rm.model->params().get(name);
    REQUIRE(orig.shape == rest.shape);
    for (std::size_t i = 0; i < orig.size(); ++i) {
      CHECK(rest.data[i] == static_cast<double>(static_cast<float>(orig.data[i])));
      CHECK(rest.data[i] == tensor.data[i]);
    }
  }
  // partitions come from the checkpoint, not recomputation from restored params
  for (const auto& [name, part] : ckpt.partitions)
    CHECK(rm.model->partitions().at(name).boundaries == part.boundaries);

  // restored embeddings are reproducible across two restores
  Tensor z1 = rm.model->node_embeddings();
  RestoredModel rm2 = restore_model(ckpt, data.table, spec.n_users, spec.n_items,
                                    data.img_features, data.txt_features);
  Tensor z2 = rm2.model->node_embeddings();
  for (std::size_t i = 0; i < z1.size(); ++i) CHECK(z1.data[i] == z2.data[i]);

  SUBCASE("population mismatch rejected") {
    CHECK_THROWS_AS(restore_model(ckpt, data.table, spec.n_users + 1, spec.n_items,
                                  data.img_features, data.txt_features),
                    DataError);
  }
  SUBCASE("corrupt magic rejected") {
    std::ofstream f(dir.file("bad.ssr"), std::ios::binary);
    f << "garbage";
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir.file("bad.ssr")), DataError);
  }
}
