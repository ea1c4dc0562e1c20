#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dastlab/dastlab.h"

namespace {

int report(dl_status s) {
  if (s == DL_OK) return 0;
  std::cerr << "dast-lab: error: " << dl_last_error() << "\n";
  return static_cast<int>(s);
}

// --seed wins, then DAST_LAB_SEED, then the fallback.
std::optional<std::uint64_t> resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return flag;
  if (const char* env = std::getenv("DAST_LAB_SEED"); env && *env) {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw std::invalid_argument("DAST_LAB_SEED must be a non-negative integer");
    return v;
  }
  return std::nullopt;
}

struct ConfigHandle {
  dl_config* cfg = nullptr;
  ~ConfigHandle() { dl_config_free(cfg); }
};

dl_status open_config(const std::string& path, ConfigHandle& h) {
  return path.empty() ? dl_config_new(&h.cfg) : dl_config_load(path.c_str(), &h.cfg);
}

dl_status set_seed(ConfigHandle& h, const std::optional<std::uint64_t>& seed) {
  if (!seed) return DL_OK;
  return dl_config_set(h.cfg, "seed", std::to_string(*seed).c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Disease-aware radiology report generation toolkit"};
  app.require_subcommand(1);

  std::size_t n = 0, image_size = 32, patch_size = 4, k = 1;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  std::string out, data, config, ckpt, index, stage1_ckpt, split, hyp, ref, study_id;
  bool no_dast_dvaf = false, no_dmsr = false;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic planted-pattern dataset");
  gen->add_option("--n", n, "Number of studies")->required();
  gen->add_option("--image-size", image_size, "Image side in pixels");
  gen->add_option("--patch-size", patch_size, "Patch side in pixels");
  gen->add_option("--seed", seed, "Random seed (falls back to DAST_LAB_SEED)");
  gen->add_option("--out", out, "Output directory")->required();

  auto* s1 = app.add_subcommand("train-stage1", "Train encoder, disease tokens and heads");
  s1->add_option("--data", data, "Dataset directory")->required();
  s1->add_option("--config", config, "key=value config file");
  s1->add_option("--out-ckpt", out, "Checkpoint path")->required();
  s1->add_option("--seed", seed, "Overrides the config seed");

  auto* bi = app.add_subcommand("build-index", "Store pooled features, logits and reports of the training split");
  bi->add_option("--data", data, "Dataset directory")->required();
  bi->add_option("--ckpt", ckpt, "Stage-1 checkpoint")->required();
  bi->add_option("--out-index", out, "Index path")->required();

  auto* s2 = app.add_subcommand("train-stage2", "Train the projection path with the backbone frozen");
  s2->add_option("--data", data, "Dataset directory")->required();
  s2->add_option("--stage1-ckpt", stage1_ckpt, "Stage-1 checkpoint")->required();
  s2->add_option("--index", index, "Exemplar index");
  s2->add_option("--config", config, "key=value config file");
  s2->add_option("--out-ckpt", out, "Checkpoint path")->required();
  s2->add_flag("--no-dast-dvaf", no_dast_dvaf, "Visual prefix from patch tokens only");
  s2->add_flag("--no-dmsr", no_dmsr, "Disable exemplar retrieval");
  s2->add_option("--lambda", lambda, "Weight of the disease-logit similarity");
  s2->add_option("--seed", seed, "Overrides the config seed");

  auto* ge = app.add_subcommand("generate", "Greedy report generation");
  ge->add_option("--data-split", split, "Split manifest or dataset directory (test split)")->required();
  ge->add_option("--ckpt", ckpt, "Stage-2 checkpoint")->required();
  ge->add_option("--index", index, "Exemplar index");
  ge->add_option("--out", out, "Output JSONL")->required();

  auto* ev = app.add_subcommand("evaluate", "NLG and clinical-efficacy metrics");
  ev->add_option("--hyp", hyp, "Generated reports JSONL")->required();
  ev->add_option("--ref", ref, "Dataset directory or reference JSONL")->required();
  ev->add_option("--out", out, "Metrics JSON")->required();

  auto* qi = app.add_subcommand("query-index", "Nearest stored studies to a stored study");
  qi->add_option("--index", index, "Exemplar index")->required();
  qi->add_option("--study-id", study_id, "Query study")->required();
  qi->add_option("--lambda", lambda, "Weight of the disease-logit similarity");
  qi->add_option("--k", k, "Number of neighbours");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "dast-lab: error: " << e.what() << "\n";
    return e.get_exit_code() ? e.get_exit_code() : 1;
  }

  try {
    if (*gen) {
      return report(dl_gen_data(n, image_size, patch_size, resolve_seed(seed).value_or(0), out.c_str()));
    }
    if (*s1) {
      ConfigHandle h;
      if (auto s = open_config(config, h); s != DL_OK) return report(s);
      if (auto s = set_seed(h, resolve_seed(seed)); s != DL_OK) return report(s);
      if (auto s = dl_config_set(h.cfg, "stage", "1"); s != DL_OK) return report(s);
      return report(dl_train_stage1(data.c_str(), h.cfg, out.c_str()));
    }
    if (*bi) return report(dl_build_index(data.c_str(), ckpt.c_str(), out.c_str()));
    if (*s2) {
      ConfigHandle h;
      if (auto s = open_config(config, h); s != DL_OK) return report(s);
      if (auto s = set_seed(h, resolve_seed(seed)); s != DL_OK) return report(s);
      if (auto s = dl_config_set(h.cfg, "stage", "2"); s != DL_OK) return report(s);
      if (no_dast_dvaf) {
        if (auto s = dl_config_set(h.cfg, "use_dast_dvaf", "false"); s != DL_OK) return report(s);
      }
      if (no_dmsr) {
        if (auto s = dl_config_set(h.cfg, "use_dmsr", "false"); s != DL_OK) return report(s);
      }
      if (lambda) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", *lambda);
        if (auto s = dl_config_set(h.cfg, "lambda", buf); s != DL_OK) return report(s);
      }
      return report(dl_train_stage2(data.c_str(), stage1_ckpt.c_str(), index.empty() ? nullptr : index.c_str(), h.cfg,
                                    out.c_str()));
    }
    if (*ge) {
      return report(dl_generate(split.c_str(), ckpt.c_str(), index.empty() ? nullptr : index.c_str(), out.c_str()));
    }
    if (*ev) return report(dl_evaluate(hyp.c_str(), ref.c_str(), out.c_str()));
    if (*qi) {
      dl_index* idx = nullptr;
      if (auto s = dl_index_load(index.c_str(), &idx); s != DL_OK) return report(s);
      char* text = nullptr;
      const auto s = dl_index_query(idx, study_id.c_str(), lambda.value_or(0.5), k, &text);
      dl_index_free(idx);
      if (s != DL_OK) return report(s);
      std::cout << text;
      dl_string_free(text);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "dast-lab: error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
