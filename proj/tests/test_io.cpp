#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "fpcrf/io.hpp"
#include "fpcrf/rng.hpp"
#include "fpcrf/types.hpp"
#include "test_util.hpp"

using namespace fpcrf;

TEST_CASE("FPT1 round-trip is bit-exact") {
  TempDir tmp("fpt1_roundtrip");

  SECTION("2x3 zeros") {
    Tensor t({2, 3});
    write_tensor(t, tmp.file("z.fpt"));
    Tensor back = read_tensor(tmp.file("z.fpt"));
    REQUIRE(back.dims == t.dims);
    REQUIRE(back.data == t.data);
  }

  SECTION("random payloads, random shapes") {
    SplitMix64 rng(41);
    for (int trial = 0; trial < 20; ++trial) {
      const int nd = rng.next_int(1, 4);
      std::vector<std::uint32_t> dims;
      for (int d = 0; d < nd; ++d) dims.push_back(static_cast<std::uint32_t>(rng.next_int(1, 6)));
      Tensor t(dims);
      for (auto& v : t.data)
        v = static_cast<float>(rng.next_range(-1e6, 1e6));
      // exercise exact-representation corners too
      if (!t.data.empty()) {
        t.data[0] = -0.0f;
        t.data[t.data.size() - 1] = 1.1754944e-38f;  // smallest normal
      }
      const std::string path = tmp.file("t" + std::to_string(trial) + ".fpt");
      write_tensor(t, path);
      Tensor back = read_tensor(path);
      REQUIRE(back.dims == t.dims);
      REQUIRE(back.data.size() == t.data.size());
      REQUIRE(std::memcmp(back.data.data(), t.data.data(), 4 * t.data.size()) == 0);
    }
  }
}

TEST_CASE("FPT1 malformed files are rejected with byte offsets") {
  TempDir tmp("fpt1_bad");

  SECTION("bad magic") {
    write_text(tmp.file("bad.fpt"), "NOPE_________");
    REQUIRE_THROWS_MATCHES(read_tensor(tmp.file("bad.fpt")), IoError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("bad magic at byte offset 0")));
  }

  SECTION("truncated payload: ndim=1, dims=[2], 4 of 8 payload bytes") {
    std::string bytes = "FPT1";
    const unsigned char tail[] = {1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0};
    bytes.append(reinterpret_cast<const char*>(tail), sizeof(tail));
    write_text(tmp.file("trunc.fpt"), bytes);
    REQUIRE_THROWS_MATCHES(
        read_tensor(tmp.file("trunc.fpt")), IoError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("truncated")));
  }

  SECTION("NaN payload rejected on read, offset named") {
    std::string bytes = "FPT1";
    const unsigned char hdr[] = {1, 0, 0, 0, 2, 0, 0, 0};
    bytes.append(reinterpret_cast<const char*>(hdr), sizeof(hdr));
    const float vals[] = {1.0f, std::nanf("")};
    bytes.append(reinterpret_cast<const char*>(vals), sizeof(vals));
    write_text(tmp.file("nan.fpt"), bytes);
    REQUIRE_THROWS_MATCHES(read_tensor(tmp.file("nan.fpt")), IoError,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
                               "non-finite value at byte offset 16")));
  }

  SECTION("NaN tensor refused on write") {
    Tensor t({2});
    t.data[1] = std::nanf("");
    REQUIRE_THROWS_AS(write_tensor(t, tmp.file("out.fpt")), NumericError);
    REQUIRE(!std::filesystem::exists(tmp.file("out.fpt")));
  }

  SECTION("missing file") {
    REQUIRE_THROWS_AS(read_tensor(tmp.file("absent.fpt")), IoError);
  }
}

TEST_CASE("PGM masks") {
  TempDir tmp("pgm");

  SECTION("threshold: 128 -> 1, 127 -> 0") {
    std::string bytes = "P5\n2 1\n255\n";
    bytes.push_back(static_cast<char>(128));
    bytes.push_back(static_cast<char>(127));
    write_text(tmp.file("t.pgm"), bytes);
    BinaryMask m = read_mask_pgm(tmp.file("t.pgm"));
    REQUIRE(m.height == 1);
    REQUIRE(m.width == 2);
    REQUIRE(m.at(0, 0) == 1);
    REQUIRE(m.at(0, 1) == 0);
  }

  SECTION("all-255 -> ones, all-0 -> zeros") {
    std::string ones = "P5\n3 2\n255\n";
    std::string zeros = ones;
    for (int i = 0; i < 6; ++i) {
      ones.push_back(static_cast<char>(255));
      zeros.push_back(static_cast<char>(0));
    }
    write_text(tmp.file("ones.pgm"), ones);
    write_text(tmp.file("zeros.pgm"), zeros);
    BinaryMask a = read_mask_pgm(tmp.file("ones.pgm"));
    BinaryMask b = read_mask_pgm(tmp.file("zeros.pgm"));
    for (int i = 0; i < 6; ++i) {
      REQUIRE(a.bits[i] == 1);
      REQUIRE(b.bits[i] == 0);
    }
  }

  SECTION("write-read round-trip, comments in header survive") {
    SplitMix64 rng(7);
    BinaryMask m(5, 4);
    for (auto& b : m.bits) b = rng.next_u64() & 1;
    write_mask_pgm(m, tmp.file("rt.pgm"));
    BinaryMask back = read_mask_pgm(tmp.file("rt.pgm"));
    REQUIRE(back.bits == m.bits);

    std::string commented = "P5\n# produced by hand\n1 1\n255\n";
    commented.push_back(static_cast<char>(200));
    write_text(tmp.file("c.pgm"), commented);
    REQUIRE(read_mask_pgm(tmp.file("c.pgm")).at(0, 0) == 1);
  }

  SECTION("rejects wrong magic and wrong maxval") {
    write_text(tmp.file("p2.pgm"), "P2\n1 1\n255\n0");
    REQUIRE_THROWS_AS(read_mask_pgm(tmp.file("p2.pgm")), IoError);

    std::string deep = "P5\n1 1\n65535\n";
    deep.push_back(0);
    deep.push_back(0);
    write_text(tmp.file("deep.pgm"), deep);
    REQUIRE_THROWS_MATCHES(
        read_mask_pgm(tmp.file("deep.pgm")), IoError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("maxval")));
  }
}

TEST_CASE("config parsing") {
  TempDir tmp("config");

  SECTION("empty file -> all defaults") {
    write_text(tmp.file("empty.conf"), "");
    RunSettings s = parse_config(tmp.file("empty.conf"));
    REQUIRE(s.filter_radius == 7);
    REQUIRE(s.iterations == 5);
    REQUIRE(s.tolerance == 1e-6);
    REQUIRE(s.learning_rate == 0.0001);
    REQUIRE(s.batch_size == 4);
    REQUIRE(s.classes == 11);
    REQUIRE(s.truncation == 20.0);
    REQUIRE(s.search_radius == 7);
    REQUIRE(s.patch_size == 256);
    REQUIRE(s.overlap == 0);
    REQUIRE(s.threads == 1);
  }

  SECTION("values, comments, and blank lines") {
    write_text(tmp.file("a.conf"),
               "# crf setup\n"
               "kernels = a+s+fd\n"
               "filter_radius = 5\n"
               "\n"
               "theta_alpha = 2.5  # pixels\n"
               "weight_s = 0.25\n"
               "trainable = weights,compatibility\n"
               "seed = 99\n");
    RunSettings s = parse_config(tmp.file("a.conf"));
    REQUIRE(s.kernels == std::vector<KernelKind>{KernelKind::Appearance, KernelKind::Smooth,
                                                 KernelKind::FeatureDifference});
    REQUIRE(s.filter_radius == 5);
    REQUIRE(s.bandwidths.alpha == 2.5);
    REQUIRE(s.seed == 99);
    REQUIRE(s.train_weights);
    REQUIRE(!s.train_bandwidths);
    REQUIRE(s.train_compatibility);
    REQUIRE(!s.train_unary);

    CrfParams p = s.crf_params();
    REQUIRE(p.kernel_count() == 3);
    REQUIRE(p.kernel_weights == std::vector<double>{1.0, 0.25, 1.0});
    REQUIRE(p.mu(0, 0) == 0.0);
    REQUIRE(p.mu(0, 1) == 1.0);
  }

  SECTION("kernels = none disables pairwise terms") {
    write_text(tmp.file("n.conf"), "kernels = none\n");
    RunSettings s = parse_config(tmp.file("n.conf"));
    REQUIRE(s.kernels.empty());
    REQUIRE(s.crf_params().kernel_count() == 0);
  }

  SECTION("errors carry line numbers") {
    write_text(tmp.file("bad_r.conf"), "iterations = 5\nfilter_radius = 1\n");
    REQUIRE_THROWS_MATCHES(
        parse_config(tmp.file("bad_r.conf")), ConfigError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("line 2")));

    write_text(tmp.file("bad_key.conf"), "filtr_radius = 7\n");
    REQUIRE_THROWS_MATCHES(parse_config(tmp.file("bad_key.conf")), ConfigError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("unknown key 'filtr_radius'")));

    write_text(tmp.file("bad_bw.conf"), "theta_beta = -0.5\n");
    REQUIRE_THROWS_MATCHES(
        parse_config(tmp.file("bad_bw.conf")), ConfigError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("must be > 0")));

    write_text(tmp.file("bad_kernel.conf"), "kernels = a+q\n");
    REQUIRE_THROWS_MATCHES(parse_config(tmp.file("bad_kernel.conf")), ConfigError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("unknown kernel name 'q'")));

    write_text(tmp.file("bad_num.conf"), "tolerance = soon\n");
    REQUIRE_THROWS_AS(parse_config(tmp.file("bad_num.conf")), ConfigError);

    write_text(tmp.file("no_eq.conf"), "threads 4\n");
    REQUIRE_THROWS_MATCHES(
        parse_config(tmp.file("no_eq.conf")), ConfigError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("key = value")));
  }

  SECTION("cross-field validation") {
    write_text(tmp.file("olap.conf"), "size = 64\noverlap = 64\n");
    REQUIRE_THROWS_MATCHES(
        parse_config(tmp.file("olap.conf")), ConfigError,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("overlap")));
  }
}

TEST_CASE("unary <-> probability round-trip within 1e-6") {
  SplitMix64 rng(17);
  ProbabilityField p(4, 3, 5);
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    double total = 0.0;
    std::vector<double> raw(5);
    for (auto& v : raw) {
      v = rng.next_range(0.05, 1.0);
      total += v;
    }
    for (int l = 0; l < 5; ++l) p.q[i * 5 + l] = raw[l] / total;
  }

  UnaryField u = UnaryField::from_probabilities(p);
  // softmax(-psi) should land back on the original distribution
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    double denom = 0.0;
    for (int l = 0; l < 5; ++l) denom += std::exp(-u.psi[i * 5 + l]);
    for (int l = 0; l < 5; ++l) {
      const double back = std::exp(-u.psi[i * 5 + l]) / denom;
      REQUIRE(std::abs(back - p.q[i * 5 + l]) < 1e-6);
    }
  }
}

TEST_CASE("tensor/compute-type conversions validate shapes") {
  Tensor t({2, 2});
  REQUIRE_THROWS_AS(unary_from_tensor(t), IoError);

  Tensor labels({2, 2});
  labels.data = {0.0f, 1.0f, 2.0f, 1.0f};
  LabelField lf = labels_from_tensor(labels, 3);
  REQUIRE(lf.at(0, 1) == 1);
  REQUIRE(lf.at(1, 0) == 2);
  labels.data[3] = 9.0f;
  REQUIRE_THROWS_AS(labels_from_tensor(labels, 3), IoError);
}
