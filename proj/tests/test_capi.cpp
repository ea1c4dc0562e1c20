#include <algorithm>
#include <string>

#include "dastlab/dastlab.h"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

TEST_SUITE("capi") {

TEST_CASE("configuration handles") {
  dl_config* cfg = nullptr;
  REQUIRE(dl_config_new(&cfg) == DL_OK);
  CHECK(dl_config_set(cfg, "base_lr", "0.01") == DL_OK);
  CHECK(dl_config_set(cfg, "no_such_key", "1") == DL_ERR_ARGUMENT);
  CHECK(std::string(dl_last_error()).find("no_such_key") != std::string::npos);
  CHECK(dl_config_set(cfg, "batch_size", "many") == DL_ERR_ARGUMENT);
  CHECK(dl_config_set(nullptr, "base_lr", "1") == DL_ERR_ARGUMENT);
  CHECK(dl_config_new(nullptr) == DL_ERR_ARGUMENT);
  dl_config_free(cfg);
  dl_config_free(nullptr);

  dl_config* loaded = nullptr;
  CHECK(dl_config_load("/nonexistent/x.cfg", &loaded) != DL_OK);
  CHECK(loaded == nullptr);
  CHECK(std::string(dl_version()).size() > 0);
}

TEST_CASE("end to end through the C interface") {
  auto dir = dast::test::scratch_dir("capi");
  const auto data = (dir / "data").string();
  REQUIRE(dl_gen_data(20, 8, 4, 5, data.c_str()) == DL_OK);
  CHECK(dl_gen_data(20, 9, 4, 5, (dir / "bad").string().c_str()) == DL_ERR_ARGUMENT);

  dl_config* cfg = nullptr;
  REQUIRE(dl_config_new(&cfg) == DL_OK);
  for (auto [k, v] : {std::pair{"total_steps", "4"}, {"warmup_steps", "1"}, {"batch_size", "4"}, {"encoder_width", "8"},
                      {"encoder_blocks", "1"}, {"decoder_width", "8"}, {"decoder_heads", "2"}, {"decoder_blocks", "1"},
                      {"decoder_ffn", "8"}, {"pretrain_steps", "2"}, {"pretrain_warmup", "1"}})
    REQUIRE(dl_config_set(cfg, k, v) == DL_OK);

  const auto s1 = (dir / "s1.ckpt").string(), idx = (dir / "s1.idx").string(), s2 = (dir / "s2.ckpt").string();
  REQUIRE(dl_train_stage1(data.c_str(), cfg, s1.c_str()) == DL_OK);
  CHECK(!dast::test::slurp(s1 + ".log.jsonl").empty());
  REQUIRE(dl_build_index(data.c_str(), s1.c_str(), idx.c_str()) == DL_OK);
  REQUIRE(dl_train_stage2(data.c_str(), s1.c_str(), idx.c_str(), cfg, s2.c_str()) == DL_OK);
  CHECK(dl_train_stage2(data.c_str(), s1.c_str(), nullptr, cfg, (dir / "x.ckpt").string().c_str()) == DL_ERR_ARGUMENT);
  // a stage-2 checkpoint is not a stage-1 checkpoint
  CHECK(dl_build_index(data.c_str(), s2.c_str(), (dir / "y.idx").string().c_str()) == DL_ERR_FORMAT);

  const auto reports = (dir / "reports.jsonl").string(), metrics = (dir / "metrics.json").string();
  REQUIRE(dl_generate(data.c_str(), s2.c_str(), idx.c_str(), reports.c_str()) == DL_OK);
  REQUIRE(dl_evaluate(reports.c_str(), data.c_str(), metrics.c_str()) == DL_OK);
  CHECK(dast::test::slurp(metrics).find("bleu_4") != std::string::npos);

  dl_index* index = nullptr;
  REQUIRE(dl_index_load(idx.c_str(), &index) == DL_OK);
  CHECK(dl_index_size(index) == 14);
  char* json = nullptr;
  const auto manifest = dast::test::slurp(data + "/train.jsonl");
  const std::string first = nlohmann::json::parse(manifest.substr(0, manifest.find('\n'))).at("study_id");
  REQUIRE(dl_index_query(index, first.c_str(), 0.5, 3, &json) == DL_OK);
  const std::string lines(json);
  dl_string_free(json);
  CHECK(lines.find(first) == std::string::npos);
  CHECK(std::count(lines.begin(), lines.end(), '\n') == 3);
  CHECK(dl_index_query(index, "nobody", 0.5, 3, &json) != DL_OK);
  CHECK(dl_index_query(index, first.c_str(), -1.0, 3, &json) == DL_ERR_ARGUMENT);
  dl_index_free(index);
  dl_config_free(cfg);

  dast::test::spit(dir / "broken.idx", "not an index");
  dl_index* none = nullptr;
  CHECK(dl_index_load((dir / "broken.idx").string().c_str(), &none) == DL_ERR_FORMAT);
  CHECK(none == nullptr);
  CHECK(dl_index_load((dir / "missing.idx").string().c_str(), &none) != DL_OK);
  CHECK(dl_generate(data.c_str(), (dir / "broken.idx").string().c_str(), nullptr, reports.c_str()) == DL_ERR_FORMAT);
}

}  // TEST_SUITE
