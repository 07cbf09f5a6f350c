#include <doctest.h>

#include <cstring>
#include <fstream>
#include <limits>

#include "regionlets/checkpoint.hpp"
#include "regionlets/config.hpp"
#include "regionlets/experiment.hpp"
#include "regionlets/rng.hpp"
#include "test_util.hpp"

using namespace regionlets;

TEST_SUITE("rng") {
  TEST_CASE("splitmix streams") {
    SplitMix64 a(7), b(7), c(8);
    for (int i = 0; i < 10; ++i) {
      const auto x = a.next();
      CHECK(x == b.next());
      CHECK(x != c.next());
    }
    // Reference outputs of splitmix64 seeded with 0.
    SplitMix64 z(0);
    CHECK(z.next() == 0xe220a8397b1dcdafULL);
    CHECK(z.next() == 0x6e789e6aa1b965f4ULL);
    CHECK(derive_seed(1, 2) != derive_seed(2, 1));
    CHECK(derive_seed(1, 2) == derive_seed(1, 2));
    SplitMix64 r(3);
    double mean = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const double u = r.uniform();
      CHECK(u >= 0.0);
      CHECK(u < 1.0);
      const double g = r.normal();
      mean += g;
      sq += g * g;
      CHECK(r.below(5) < 5);
    }
    CHECK(std::abs(mean / n) < 0.05);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip and layout") {
    const NamedTensors t{{"a", Tensor({2, 3}, {1, 2, 3, 4, 5, -6.5})}, {"bias", Tensor({1}, {0.1})}};
    const std::string bytes = encode_checkpoint(t);
    CHECK(bytes.rfind("REGIONLET-CKPT v1 2\n", 0) == 0);
    std::size_t pos = std::strlen("REGIONLET-CKPT v1 2\n");
    std::uint64_t name_len = 0;
    for (int i = 0; i < 8; ++i) name_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    CHECK(name_len == 1);
    CHECK(bytes[pos + 8] == 'a');
    // header, then per tensor 8 + name + 8 + 8 * rank + 8 * size
    CHECK(bytes.size() == 20 + (8 + 1 + 8 + 16 + 48) + (8 + 4 + 8 + 8 + 8));
    CHECK(decode_checkpoint(bytes) == t);

    const auto dir = regionlets::testing::scratch_dir("ckpt");
    write_checkpoint(dir / "m.ckpt", t);
    CHECK(read_checkpoint(dir / "m.ckpt") == t);
    CHECK_THROWS_AS(read_checkpoint(dir / "nope.ckpt"), CheckpointError);
  }

  TEST_CASE("corrupt inputs are rejected") {
    const NamedTensors t{{"w", Tensor({2}, {1, 2})}};
    const std::string bytes = encode_checkpoint(t);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
    CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), CheckpointError);
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
    CHECK_THROWS_AS(decode_checkpoint("REGIONLET-CKPT v2 1\n"), CheckpointError);
    CHECK_THROWS_AS(decode_checkpoint(""), CheckpointError);
  }

  TEST_CASE("non-finite values survive bit for bit") {
    Tensor t({2});
    t[0] = -0.0;
    t[1] = std::numeric_limits<double>::denorm_min();
    const NamedTensors back = decode_checkpoint(encode_checkpoint({{"x", t}}));
    CHECK(std::signbit(back[0].second[0]));
    CHECK(back[0].second[1] == std::numeric_limits<double>::denorm_min());
  }
}

TEST_SUITE("config") {
  TEST_CASE("key value parsing") {
    const auto kv = KeyValueConfig::parse("# heading\n a = 1 \nb=two words # trailing\n\nflag = true\n");
    CHECK(kv.get_int("a", 0) == 1);
    CHECK(kv.get_string("b", "") == "two words");
    CHECK(kv.get_bool("flag", false));
    CHECK(kv.get_double("missing", 2.5) == 2.5);
    CHECK_THROWS_AS(KeyValueConfig::parse("novalue\n"), ConfigError);
    CHECK_THROWS_AS(KeyValueConfig::parse("a = 1\na = 2\n"), ConfigError);
    CHECK_THROWS_AS(KeyValueConfig::parse("a = x").get_double("a", 0), ConfigError);
    CHECK_THROWS_AS(KeyValueConfig::parse("a = -1").get_size("a", 0), ConfigError);
    CHECK_THROWS_AS(KeyValueConfig::parse("a = maybe").get_bool("a", false), ConfigError);
  }

  TEST_CASE("unknown experiment keys name the key") {
    try {
      ExperimentConfig::from_kv(KeyValueConfig::parse("train.epochs = 3\nrsn.regoins = 9\n"));
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("rsn.regoins") != std::string::npos);
    }
  }

  TEST_CASE("experiment config round trip") {
    ExperimentConfig cfg;
    cfg.detector.rsn.num_regions = 9;
    cfg.detector.rsn.mode = RsnMode::offset_only;
    cfg.detector.gate.enabled = false;
    cfg.detector.pool.mode = PoolMode::average;
    cfg.detector.head.density_h = cfg.detector.head.density_w = 3;
    cfg.train.schedule = {{0, 0.05}, {100, 0.004}};
    cfg.seed = 12;
    const ExperimentConfig back = ExperimentConfig::from_kv(KeyValueConfig::parse(cfg.to_text()));
    CHECK(back.to_text() == cfg.to_text());
    CHECK(back.detector.rsn.mode == RsnMode::offset_only);
    CHECK_FALSE(back.detector.gate.enabled);
    CHECK(back.train.schedule.size() == 2);
    CHECK(back.seed == 12);
    for (const auto& key : experiment_keys()) CHECK(cfg.to_text().find(key + " = ") != std::string::npos);
  }

  TEST_CASE("invalid experiment settings") {
    CHECK_THROWS_AS(ExperimentConfig::from_kv(KeyValueConfig::parse("head.num_classes = 5")), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_kv(KeyValueConfig::parse("rsn.num_regions = 8")), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_kv(KeyValueConfig::parse("rsn.mode = global\nrsn.num_regions = 4")),
                    ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_kv(KeyValueConfig::parse("train.batch_images = 0")), ConfigError);
  }

  TEST_CASE("learning-rate schedules") {
    const auto s = parse_lr_schedule("0:1e-3, 2500:1e-4");
    REQUIRE(s.size() == 2);
    CHECK(lr_at(s, 0) == 1e-3);
    CHECK(lr_at(s, 2499) == 1e-3);
    CHECK(lr_at(s, 2500) == 1e-4);
    CHECK(lr_at(s, 1000000) == 1e-4);
    CHECK(parse_lr_schedule(format_lr_schedule(s)).size() == 2);
    CHECK_THROWS_AS(parse_lr_schedule("10:1e-3"), ConfigError);
    CHECK_THROWS_AS(parse_lr_schedule("0:1e-3,100:1e-4,100:1e-5"), ConfigError);
    CHECK_THROWS_AS(parse_lr_schedule("0:1e-3,50:1e-4,20:1e-5"), ConfigError);
    CHECK_THROWS_AS(parse_lr_schedule("0:0"), ConfigError);
    CHECK_THROWS_AS(parse_lr_schedule("0:-1"), ConfigError);
    CHECK_THROWS_AS(parse_lr_schedule("0:abc"), ConfigError);
    CHECK_THROWS_AS(parse_lr_schedule(""), ConfigError);
  }
}
