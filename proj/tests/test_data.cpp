#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "bruno/checkpoint.hpp"
#include "bruno/config.hpp"
#include "bruno/crc32.hpp"
#include "bruno/data.hpp"
#include "bruno/idx.hpp"
#include "bruno/image.hpp"
#include "bruno/model.hpp"

using namespace bruno;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), long(bytes.size()));
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("synth_exchangeable") {
  SUBCASE("rho = 0 gives iid items around the class mean") {
    const auto ds = synth_exchangeable(0.0, 4, 3, 4000, 1, 6.0);
    CHECK(ds.dim() == 4);
    CHECK(ds.size() == 12000);
    CHECK(ds.num_classes() == 3);
    // class means on the grid: -6, 0, 6
    for (int c = 0; c < 3; ++c) {
      const double expect = 6.0 * (c - 1);
      Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
      for (int idx : ds.class_index[std::size_t(c)]) mean += ds.items.col(idx);
      mean /= double(ds.class_index[std::size_t(c)].size());
      for (int d = 0; d < 4; ++d) CHECK(std::abs(mean[d] - expect) < 0.1);
    }
    // within-class inter-item covariance vanishes
    double cov = 0;
    long pairs = 0;
    const auto& idx = ds.class_index[1];  // mean 0
    for (std::size_t i = 0; i + 1 < idx.size(); i += 2, ++pairs)
      cov += ds.items(0, idx[i]) * ds.items(0, idx[i + 1]);
    CHECK(std::abs(cov / double(pairs)) < 0.05);
  }
  SUBCASE("rho = 0.5 shows up as within-class covariance") {
    const auto ds = synth_exchangeable(0.5, 2, 400, 8, 2, 0.0);
    double cov = 0, var = 0;
    long pairs = 0, n = 0;
    for (const auto& idx : ds.class_index) {
      for (std::size_t i = 0; i + 1 < idx.size(); i += 2, ++pairs)
        cov += ds.items(0, idx[i]) * ds.items(0, idx[i + 1]);
      for (int id : idx) {
        var += ds.items(0, id) * ds.items(0, id);
        ++n;
      }
    }
    CHECK(std::abs(cov / double(pairs) - 0.5) < 0.06);
    CHECK(std::abs(var / double(n) - 1.0) < 0.06);
  }
  SUBCASE("deterministic by seed") {
    const auto a = synth_exchangeable(0.3, 3, 4, 5, 7, 1.0);
    const auto b = synth_exchangeable(0.3, 3, 4, 5, 7, 1.0);
    const auto c = synth_exchangeable(0.3, 3, 4, 5, 8, 1.0);
    CHECK(a.items == b.items);
    CHECK(a.items != c.items);
  }
  SUBCASE("rho out of range") {
    CHECK_THROWS_AS(synth_exchangeable(1.0, 2, 2, 2, 1), ConstraintViolation);
    CHECK_THROWS_AS(synth_exchangeable(-0.1, 2, 2, 2, 1), ConstraintViolation);
  }
}

TEST_CASE("standardize centers and scales each dimension") {
  auto ds = synth_exchangeable(0.3, 3, 4, 200, 9, 4.0);
  standardize(ds);
  for (long d = 0; d < 3; ++d) {
    const double m = ds.items.row(d).mean();
    const double v = (ds.items.row(d).array() - m).square().sum() / double(ds.size());
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(v - 1.0) < 1e-9);
  }
}

TEST_CASE("episode_stream") {
  // items encode their label directly, so sequences are easy to audit
  Dataset ds;
  const int classes = 3, per_class = 20;
  ds.items.resize(2, classes * per_class);
  ds.labels.resize(std::size_t(classes) * per_class);
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) {
      const int col = c * per_class + i;
      ds.items(0, col) = c;
      ds.items(1, col) = i;
      ds.labels[std::size_t(col)] = c;
    }
  ds.rebuild_index();

  SUBCASE("sequences stay within one class") {
    EpisodeStream stream(ds, 6, 4, 10);
    for (int rep = 0; rep < 5; ++rep) {
      for (const auto& seq : stream.next()) {
        const double c = seq(0, 0);
        for (long j = 0; j < seq.cols(); ++j) CHECK(seq(0, j) == c);
      }
    }
  }
  SUBCASE("seq_len equal to the class size exhausts the class") {
    EpisodeStream stream(ds, 20, 1, 11);
    const auto batch = stream.next();
    std::vector<int> seen(per_class, 0);
    for (long j = 0; j < 20; ++j) seen[std::size_t(batch[0](1, j))]++;
    for (int s : seen) CHECK(s == 1);  // each item exactly once
  }
  SUBCASE("same seed reproduces the batches") {
    EpisodeStream a(ds, 5, 3, 12), b(ds, 5, 3, 12);
    for (int rep = 0; rep < 3; ++rep) {
      const auto ba = a.next(), bb = b.next();
      for (std::size_t i = 0; i < ba.size(); ++i) CHECK(ba[i] == bb[i]);
    }
  }
  SUBCASE("undersized classes are rejected") {
    CHECK_THROWS_AS(EpisodeStream(ds, 21, 1, 13), InsufficientData);
  }
}

TEST_CASE("idx parsing") {
  // handcrafted: 2 images of 2x2, pixels 1..8, labels {1, 0}
  const std::vector<std::uint8_t> images = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2,
                                            0, 0, 0, 2, 1, 2, 3, 4, 5, 6, 7, 8};
  const std::vector<std::uint8_t> labels = {0, 0, 8, 1, 0, 0, 0, 2, 1, 0};

  SUBCASE("fixture round trip") {
    const auto img = parse_idx(images);
    const auto lab = parse_idx(labels);
    CHECK(img.count() == 2);
    CHECK(img.item_size() == 4);
    const auto ds = idx_to_dataset(img, lab, false);
    CHECK(ds.dim() == 4);
    CHECK(ds.size() == 2);
    CHECK(ds.items(0, 0) == 1);
    CHECK(ds.items(3, 0) == 4);
    CHECK(ds.items(0, 1) == 5);
    CHECK(ds.items(3, 1) == 8);
    CHECK(ds.labels == std::vector<int>{1, 0});
    CHECK(ds.class_index[0] == std::vector<int>{1});
    CHECK(ds.class_index[1] == std::vector<int>{0});
  }
  SUBCASE("file loading") {
    const auto ipath = tmp_path("bruno_test_images.idx");
    const auto lpath = tmp_path("bruno_test_labels.idx");
    write_bytes(ipath, images);
    write_bytes(lpath, labels);
    const auto ds = load_idx(ipath, lpath);
    CHECK(ds.size() == 2);
    CHECK(ds.items(1, 1) == 6);
  }
  SUBCASE("truncated payload") {
    auto bad = images;
    bad.pop_back();
    CHECK_THROWS_AS(parse_idx(bad), TruncatedFile);
    bad.resize(10);  // shorter than the dimension list
    CHECK_THROWS_AS(parse_idx(bad), TruncatedFile);
  }
  SUBCASE("bad magic") {
    auto bad = images;
    bad[2] = 0x09;  // dtype not unsigned byte
    CHECK_THROWS_AS(parse_idx(bad), BadMagic);
    bad = images;
    bad[0] = 1;
    CHECK_THROWS_AS(parse_idx(bad), BadMagic);
  }
  SUBCASE("image/label count mismatch") {
    const std::vector<std::uint8_t> three_labels = {0, 0, 8, 1, 0, 0, 0, 3, 1, 0, 1};
    CHECK_THROWS_AS(idx_to_dataset(parse_idx(images), parse_idx(three_labels), false),
                    DimensionMismatch);
  }
  SUBCASE("rotation augmentation") {
    // single image [1 2; 3 4]; clockwise rotations become distinct classes
    const std::vector<std::uint8_t> one_img = {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2,
                                               0, 0, 0, 2, 1, 2, 3, 4};
    const std::vector<std::uint8_t> one_lab = {0, 0, 8, 1, 0, 0, 0, 1, 0};
    const auto ds = idx_to_dataset(parse_idx(one_img), parse_idx(one_lab), true);
    CHECK(ds.size() == 4);
    CHECK(ds.num_classes() == 4);
    Eigen::VectorXd r0(4), r1(4);
    r0 << 1, 2, 3, 4;
    r1 << 3, 1, 4, 2;  // 90 degrees clockwise
    CHECK(ds.items.col(0) == r0);
    CHECK(ds.items.col(1) == r1);
    CHECK(ds.labels == std::vector<int>{0, 1, 2, 3});
  }
}

TEST_CASE("pgm/ppm emission") {
  SUBCASE("grid header and zero payload") {
    Eigen::MatrixXd samples = Eigen::MatrixXd::Zero(28 * 28, 4);
    const auto path = tmp_path("bruno_test_grid.pgm");
    emit_grid(samples, 2, 2, path);
    const auto bytes = read_bytes(path);
    const std::string header(bytes.begin(), bytes.begin() + 13);
    CHECK(header == "P5\n56 56\n255\n");
    CHECK(bytes.size() == 13 + 56 * 56);
    for (std::size_t i = 13; i < bytes.size(); ++i) CHECK(bytes[i] == 0);
  }
  SUBCASE("values clamp to the pixel range") {
    Eigen::MatrixXd s(1, 1);
    const auto path = tmp_path("bruno_test_px.pgm");
    s(0, 0) = 1.2;
    emit_grid(s, 1, 1, path);
    CHECK(read_pnm(path).pixels[0] == 255);
    s(0, 0) = -0.1;
    emit_grid(s, 1, 1, path);
    CHECK(read_pnm(path).pixels[0] == 0);
    s(0, 0) = 0.5;
    emit_grid(s, 1, 1, path);
    CHECK(read_pnm(path).pixels[0] == 128);
  }
  SUBCASE("read-back reproduces the clamped bytes") {
    Rng rng(14);
    Eigen::MatrixXd s(16, 6);
    for (long i = 0; i < s.size(); ++i) s.data()[i] = 1.4 * rng.uniform() - 0.2;
    const auto path = tmp_path("bruno_test_rt.pgm");
    emit_grid(s, 2, 3, path);
    const auto img = read_pnm(path);
    CHECK(img.width == 12);
    CHECK(img.height == 8);
    for (long t = 0; t < 6; ++t) {
      const long tr = t / 3, tc = t % 3;
      for (long y = 0; y < 4; ++y)
        for (long x = 0; x < 4; ++x) {
          const double v = s(y * 4 + x, t);
          const double p = std::floor(v * 256.0);
          const std::uint8_t expect = std::uint8_t(std::min(255.0, std::max(0.0, p)));
          CHECK(img.pixels[std::size_t((tr * 4 + y) * 12 + tc * 4 + x)] == expect);
        }
    }
  }
  SUBCASE("ppm smoke") {
    Eigen::MatrixXd s = Eigen::MatrixXd::Constant(2 * 2 * 3, 1, 0.5);
    const auto path = tmp_path("bruno_test_rgb.ppm");
    emit_grid(s, 1, 1, path, 3);
    const auto img = read_pnm(path);
    CHECK(img.channels == 3);
    CHECK(img.width == 2);
    CHECK(img.pixels.size() == 12);
  }
  SUBCASE("shape errors") {
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(16, 3);
    CHECK_THROWS_AS(emit_grid(s, 2, 2, tmp_path("x.pgm")), ShapeMismatch);
    Eigen::MatrixXd ns = Eigen::MatrixXd::Zero(15, 4);  // not square
    CHECK_THROWS_AS(emit_grid(ns, 2, 2, tmp_path("x.pgm")), ShapeMismatch);
  }
}

TEST_CASE("config round trip") {
  SUBCASE("model config") {
    ModelConfig m;
    m.dim = 784;
    m.depth = 6;
    m.hidden = 1024;
    m.mode = ProcessMode::Gaussian;
    m.weightnorm = false;
    m.pre.alpha = 1e-6;
    m.pre.dequantize = true;
    m.pre.logit = true;
    m.init_rho = 0.30000000000000004;  // must survive textually
    const auto kv = KvConfig::parse(to_kv(m).serialize());
    CHECK(model_config_from_kv(kv) == m);
  }
  SUBCASE("train config") {
    TrainConfig t;
    t.batch_size = 32;
    t.seq_len = 20;
    t.learning_rate = 1e-3;
    t.process_lr_factor = 0.1;
    t.iterations = 200000;
    t.seed = 0xDEADBEEFCAFEull;
    t.threads = 4;
    t.lr_decay = false;
    const auto kv = KvConfig::parse(to_kv(t).serialize());
    CHECK(train_config_from_kv(kv) == t);
  }
  SUBCASE("kv round trip is exact") {
    KvConfig kv;
    kv.set_double("a", 0.1 + 0.2);
    kv.set_int("b", -42);
    kv.set_bool("c", true);
    kv.set("d", "hello world");
    const auto back = KvConfig::parse(kv.serialize());
    CHECK(back == kv);
    CHECK(back.get_double("a") == 0.1 + 0.2);
  }
  SUBCASE("comments and blank lines are ignored; bad lines are not") {
    const auto kv = KvConfig::parse("# comment\n\n key = value \n");
    CHECK(kv.get("key") == "value");
    CHECK_THROWS_AS(KvConfig::parse("novalue\n"), DomainError);
  }
}

TEST_CASE("crc32 reference vector") {
  const std::string s = "123456789";
  CHECK(crc32(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()) == 0xCBF43926u);
}

TEST_CASE("checkpoint") {
  ModelConfig cfg;
  cfg.dim = 6;
  cfg.depth = 2;
  cfg.hidden = 8;
  cfg.pre.logit = false;
  cfg.pre.dequantize = false;
  auto model = make_model<double>(cfg, 15);
  {
    Rng rng(16);
    ModelGrads<double> g;
    g.match(model);
    visit_params(model, g, [&](double* p, double*, long n, bool) {
      for (long j = 0; j < n; ++j) p[j] += 0.1 * rng.normal();
    });
  }
  MatX<double> x(6, 5);
  Rng rng(17);
  for (long i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();

  SUBCASE("round trip preserves the forward pass bitwise") {
    Checkpoint<double> c;
    c.model = model;
    c.rng_state = Rng(5).state();
    c.iteration = 1234;
    const auto path = tmp_path("bruno_test_ckpt.bin");
    save_checkpoint(c, path);
    const auto back = load_checkpoint<double>(path);
    CHECK(back.iteration == 1234);
    CHECK(back.rng_state == Rng(5).state());
    CHECK(back.model.config == model.config);
    const auto a = sequence_log_likelihood(model, x);
    const auto b = sequence_log_likelihood(back.model, x);
    CHECK(a.total == b.total);  // bitwise
    for (long i = 0; i < a.per_step.size(); ++i) CHECK(a.per_step[i] == b.per_step[i]);
  }
  SUBCASE("flipped payload byte is caught by the checksum") {
    Checkpoint<double> c;
    c.model = model;
    auto bytes = serialize_checkpoint(c);
    bytes[bytes.size() / 2] ^= 0x40;
    CHECK_THROWS_AS(deserialize_checkpoint<double>(bytes), CorruptFile);
  }
  SUBCASE("truncation is caught") {
    Checkpoint<double> c;
    c.model = model;
    auto bytes = serialize_checkpoint(c);
    bytes.resize(bytes.size() - 9);
    CHECK_THROWS_AS(deserialize_checkpoint<double>(bytes), CorruptFile);
  }
  SUBCASE("version mismatch names both versions") {
    Checkpoint<double> c;
    c.model = model;
    auto bytes = serialize_checkpoint(c);
    bytes[8] = 7;  // version u32 little-endian starts after the 8-byte magic
    // refresh the trailing checksum so the version check is what fires
    const std::uint32_t crc = crc32(bytes.data(), bytes.size() - 4);
    for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + std::size_t(i)] =
        std::uint8_t(crc >> (8 * i));
    try {
      deserialize_checkpoint<double>(bytes);
      FAIL("expected VersionMismatch");
    } catch (const VersionMismatch& e) {
      const std::string msg = e.what();
      CHECK(msg.find('7') != std::string::npos);
      CHECK(msg.find('1') != std::string::npos);
    }
  }
  SUBCASE("cross-width load converts scalars") {
    Checkpoint<double> c;
    c.model = model;
    const auto path = tmp_path("bruno_test_ckpt64.bin");
    save_checkpoint(c, path);
    const auto back = load_checkpoint<float>(path);
    MatX<float> xf = x.cast<float>();
    const auto a = sequence_log_likelihood(back.model, xf);
    const auto b = sequence_log_likelihood(model, x);
    CHECK(double(a.total) == doctest::Approx(b.total).epsilon(1e-4));
  }
}

TEST_CASE("rng streams") {
  Rng a(1), b(1), c(2);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  CHECK(a.next_u64() != c.next_u64());
  // substreams differ from each other and from the base stream
  Rng s0 = Rng::stream(1, 0), s1 = Rng::stream(1, 1);
  CHECK(s0.next_u64() != s1.next_u64());
  // uniform() stays in [0, 1), uniform_pos() in (0, 1]
  Rng u(3);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
    const double y = u.uniform_pos();
    CHECK(y > 0.0);
    CHECK(y <= 1.0);
  }
}
