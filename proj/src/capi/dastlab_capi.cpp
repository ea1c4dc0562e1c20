#include "dastlab/dastlab.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "data/binary_io.hpp"
#include "data/dataset.hpp"
#include "data/synthetic.hpp"
#include "dmsr/dmsr.hpp"
#include "eval/metrics.hpp"
#include "json.hpp"
#include "pipeline/checkpoint.hpp"
#include "pipeline/config.hpp"
#include "pipeline/train.hpp"

struct dl_config {
  dast::pipeline::TrainConfig cfg;
};

struct dl_index {
  dast::dmsr::ExemplarIndex index;
};

namespace {

namespace fs = std::filesystem;
using namespace dast;

thread_local std::string g_last_error;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

dl_status fail(dl_status code, const std::string& msg) {
  g_last_error = msg;
  for (auto& c : g_last_error)
    if (c == '\n' || c == '\r') c = ' ';
  return code;
}

template <class F>
dl_status guarded(F&& body) {
  try {
    g_last_error.clear();
    body();
    return DL_OK;
  } catch (const pipeline::ConfigError& e) {
    return fail(DL_ERR_ARGUMENT, e.what());
  } catch (const pipeline::CheckpointError& e) {
    return fail(DL_ERR_FORMAT, e.what());
  } catch (const dmsr::IndexError& e) {
    return fail(DL_ERR_FORMAT, e.what());
  } catch (const io::FormatError& e) {
    return fail(DL_ERR_FORMAT, e.what());
  } catch (const data::DatasetError& e) {
    return fail(DL_ERR_FORMAT, e.what());
  } catch (const eval::MetricError& e) {
    return fail(DL_ERR_STATE, e.what());
  } catch (const nc::NumericError& e) {
    return fail(DL_ERR_NUMERIC, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(DL_ERR_ARGUMENT, e.what());
  } catch (const std::length_error& e) {
    return fail(DL_ERR_ARGUMENT, e.what());
  } catch (const IoError& e) {
    return fail(DL_ERR_IO, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(DL_ERR_IO, e.what());
  } catch (const std::exception& e) {
    return fail(DL_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(DL_ERR_INTERNAL, "unknown error");
  }
}

void require(const void* p, const char* what) {
  if (!p) throw std::invalid_argument(std::string(what) + " must not be null");
}

void write_text(const std::string& path, const std::string& text) {
  io::ByteWriter w;
  w.bytes(text.data(), text.size());
  w.write_file(path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::vector<nlohmann::json> out;
  std::istringstream in(read_text(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw data::DatasetError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::string json_string(const nlohmann::json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) throw data::DatasetError(where + ": missing string field '" + key + "'");
  return it->get<std::string>();
}

std::map<std::string, std::string> reference_reports(const std::string& ref) {
  std::vector<std::string> files;
  if (fs::is_directory(ref)) {
    for (const char* split : {"train", "val", "test"}) {
      const auto p = fs::path(ref) / (std::string(split) + ".jsonl");
      if (fs::exists(p)) files.push_back(p.string());
    }
    if (files.empty()) throw IoError("no split manifests under '" + ref + "'");
  } else {
    files.push_back(ref);
  }
  std::map<std::string, std::string> out;
  for (const auto& f : files) {
    for (const auto& j : read_jsonl(f)) {
      const auto id = json_string(j, "study_id", f);
      const auto text = j.contains("reference") ? json_string(j, "reference", f) : json_string(j, "report", f);
      if (!out.emplace(id, text).second) throw data::DatasetError(f + ": duplicate study id '" + id + "'");
    }
  }
  return out;
}

pipeline::Samples train_split(const std::string& data_dir) {
  auto train = data::load_split(data_dir, "train");
  if (train.empty()) throw data::DatasetError(data_dir + ": training split is empty");
  return train;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* dl_last_error(void) { return g_last_error.c_str(); }

const char* dl_version(void) { return "1.0.0"; }

dl_status dl_config_new(dl_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new dl_config();
  });
}

dl_status dl_config_load(const char* path, dl_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto c = std::make_unique<dl_config>();
    c->cfg = pipeline::load_config_file(path);
    *out = c.release();
  });
}

dl_status dl_config_set(dl_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    require(value, "value");
    pipeline::set_config_value(cfg->cfg, key, value);
  });
}

void dl_config_free(dl_config* cfg) { delete cfg; }

dl_status dl_gen_data(size_t n, size_t image_size, size_t patch_size, uint64_t seed, const char* out_dir) {
  return guarded([&] {
    require(out_dir, "out_dir");
    data::gen_dataset(data::SyntheticSpec::standard(n, image_size, patch_size, seed), out_dir);
  });
}

dl_status dl_train_stage1(const char* data_dir, const dl_config* cfg, const char* out_ckpt) {
  return guarded([&] {
    require(data_dir, "data_dir");
    require(cfg, "cfg");
    require(out_ckpt, "out_ckpt");
    const auto info = data::read_dataset_info(data_dir);
    const auto train = train_split(data_dir);
    std::string log;
    auto bundle = pipeline::run_stage1(cfg->cfg, train, info.patch_size, [&](const pipeline::StepRecord& r) {
      log += pipeline::step_record_json(r) + "\n";
      return true;
    });
    pipeline::save_checkpoint(out_ckpt, bundle.to_checkpoint());
    write_text(std::string(out_ckpt) + ".log.jsonl", log);
  });
}

dl_status dl_build_index(const char* data_dir, const char* stage1_ckpt, const char* out_index) {
  return guarded([&] {
    require(data_dir, "data_dir");
    require(stage1_ckpt, "stage1_ckpt");
    require(out_index, "out_index");
    auto bundle = pipeline::Stage1Bundle::from_checkpoint(pipeline::load_checkpoint(stage1_ckpt));
    pipeline::build_index(bundle.model, train_split(data_dir)).save(out_index);
  });
}

dl_status dl_train_stage2(const char* data_dir, const char* stage1_ckpt, const char* index_path, const dl_config* cfg,
                          const char* out_ckpt) {
  return guarded([&] {
    require(data_dir, "data_dir");
    require(stage1_ckpt, "stage1_ckpt");
    require(cfg, "cfg");
    require(out_ckpt, "out_ckpt");
    const auto train = train_split(data_dir);
    auto bundle = pipeline::Stage1Bundle::from_checkpoint(pipeline::load_checkpoint(stage1_ckpt));
    const std::size_t width = bundle.model.encoder.config.width;
    std::optional<dmsr::ExemplarIndex> index;
    if (cfg->cfg.use_dmsr) {
      if (!index_path) throw std::invalid_argument("retrieval is enabled but no --index was given");
      index = dmsr::ExemplarIndex::load(index_path, width);
    }
    auto model = pipeline::Stage2Model::init(cfg->cfg, std::move(bundle), train);
    std::string log;
    pipeline::run_stage2(cfg->cfg, model, train, index ? &*index : nullptr, [&](const pipeline::StepRecord& r) {
      log += pipeline::step_record_json(r) + "\n";
      return true;
    });
    pipeline::save_checkpoint(out_ckpt, model.to_checkpoint());
    write_text(std::string(out_ckpt) + ".log.jsonl", log);
  });
}

dl_status dl_generate(const char* split_path, const char* ckpt, const char* index_path, const char* out_jsonl) {
  return guarded([&] {
    require(split_path, "split_path");
    require(ckpt, "ckpt");
    require(out_jsonl, "out_jsonl");
    auto model = pipeline::Stage2Model::from_checkpoint(pipeline::load_checkpoint(ckpt));
    std::optional<dmsr::ExemplarIndex> index;
    if (model.use_dmsr) {
      if (!index_path) throw std::invalid_argument("checkpoint uses retrieval but no --index was given");
      index = dmsr::ExemplarIndex::load(index_path, model.s1.encoder.config.width);
    }
    const auto samples = data::load_split_path(split_path);
    const auto reports = pipeline::generate_reports(model, samples, index ? &*index : nullptr);
    write_text(out_jsonl, pipeline::reports_jsonl(reports));
  });
}

dl_status dl_evaluate(const char* hyp_jsonl, const char* ref_path, const char* out_json) {
  return guarded([&] {
    require(hyp_jsonl, "hyp_jsonl");
    require(ref_path, "ref_path");
    require(out_json, "out_json");
    const auto refs = reference_reports(ref_path);
    eval::Corpus corpus;
    for (const auto& j : read_jsonl(hyp_jsonl)) {
      const auto id = json_string(j, "study_id", hyp_jsonl);
      auto it = refs.find(id);
      if (it == refs.end()) throw eval::MetricError("study '" + id + "' has no reference in '" + ref_path + "'");
      corpus.add({id, json_string(j, "hypothesis", hyp_jsonl), it->second});
    }
    write_text(out_json, eval::metric_report_json(eval::evaluate_corpus(corpus)));
  });
}

dl_status dl_index_load(const char* path, dl_index** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new dl_index{dmsr::ExemplarIndex::load(path)};
  });
}

size_t dl_index_size(const dl_index* index) { return index ? index->index.size() : 0; }

dl_status dl_index_query(const dl_index* index, const char* study_id, double lambda, size_t k, char** out_json) {
  return guarded([&] {
    require(index, "index");
    require(study_id, "study_id");
    require(out_json, "out_json");
    const auto* rec = index->index.find(study_id);
    if (!rec) throw std::invalid_argument("study '" + std::string(study_id) + "' is not in the index");
    dmsr::QueryOptions opts;
    opts.lambda = lambda;
    opts.k = k;
    opts.exclude_id = rec->study_id;
    const auto hits = index->index.query(rec->z_bar, rec->logits, opts);
    std::string text;
    for (std::size_t i = 0; i < hits.size(); ++i) {
      nlohmann::ordered_json j;
      j["rank"] = i + 1;
      j["study_id"] = hits[i].study_id;
      j["score"] = hits[i].score;
      text += j.dump() + "\n";
    }
    *out_json = dup_string(text);
  });
}

void dl_index_free(dl_index* index) { delete index; }

void dl_string_free(char* s) { std::free(s); }

}  // extern "C"
