#include "doctest.h"

#include <string>

#include "mantis/run_config.hpp"

using namespace mantis;

TEST_CASE("defaults and text round trip") {
  const RunConfig d;
  CHECK(d.train.p_text_dropout == 0.3);
  CHECK(d.train.lr_peak == 3e-4);
  CHECK(d.model.dropout == 0.1);
  CHECK(d.gen.strategy == GenerationConfig::Strategy::kGreedy);
  CHECK(d.model.vision.feature_dim == 32);

  RunConfig c;
  c.set("model.cond_mode", "context_attn");
  c.set("train.lr_peak", "1.25e-3");
  c.set("train.loss_on_name", "true");
  c.set("gen.strategy", "top_k");
  c.set("data.dir", "some/where");
  c.set_seed(99);
  const RunConfig back = parse_config_text(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(RunConfig::from_json(c.to_json()).to_text() == c.to_text());
  CHECK(back.model.cond_mode == CondMode::kContextAttn);
  CHECK(back.train.lr_peak == 1.25e-3);
  CHECK(back.train.seed == 99);
  CHECK(back.data.seed == 99);
  CHECK(back.gen.seed == 99);
  CHECK(back.data_dir == "some/where");
  for (const auto& k : RunConfig::keys()) CHECK(c.to_json().find("\"" + k + "\"") != std::string::npos);
}

TEST_CASE("doubles survive formatting exactly") {
  RunConfig c;
  for (double v : {0.1, 1.0 / 3.0, 3e-4, 1e-300, 0.30000000000000004}) {
    c.train.lr_peak = v;
    CHECK(parse_config_text(c.to_text()).train.lr_peak == v);
  }
}

TEST_CASE("file syntax") {
  const RunConfig c = parse_config_text("# comment\n\n  model.layers = 3  \nmodel.embed_dim=32\r\ndata.image_size = 32\n");
  CHECK(c.model.layers == 3);
  CHECK(c.model.embed_dim == 32);
  CHECK(c.model.vision.embed_dim == 32);
  CHECK(c.model.vision.image_size == 32);
  CHECK(c.data.image_size == 32);
}

TEST_CASE("errors name the line") {
  CHECK_THROWS_WITH_AS(parse_config_text("model.layers = 2\nmodel.colour = red\n"),
                       doctest::Contains("line 2"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("model.layers = two\n"), doctest::Contains("model.layers"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("\n\njust words\n"), doctest::Contains("line 3"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("model.cond_mode = cross\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("train.loss_on_name = maybe\n"), ConfigError);
  RunConfig c;
  CHECK_THROWS_AS(c.set("nope", "1"), ConfigError);
}
