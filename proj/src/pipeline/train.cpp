#include "pipeline/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "eval/metrics.hpp"
#include "json.hpp"

namespace dast::pipeline {

using nc::Tensor;
using nc::Var;

namespace {

// Epoch-wise seeded permutation; batches run across epoch boundaries.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    shuffle();
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) shuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.index(i)]);
    pos_ = 0;
  }

  nc::Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

void clear_grads(const VisitAll& visit) {
  visit([](const std::string&, Tensor& t) { t.clear_grad(); });
}

AdamWOptions adamw_options(const TrainConfig& cfg) { return {cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay}; }

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t meta_size(const Checkpoint& c, const std::string& k) {
  const auto& v = c.meta_at(k);
  try {
    std::size_t used = 0;
    const auto out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(out);
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint: metadata '" + k + "' is not an integer");
  }
}

double meta_real(const Checkpoint& c, const std::string& k) {
  const auto& v = c.meta_at(k);
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint: metadata '" + k + "' is not a number");
  }
}

void expect_kind(const Checkpoint& c, const std::string& kind) {
  if (c.meta_at("kind") != kind) {
    throw CheckpointError("checkpoint: expected a " + kind + " checkpoint, found " + c.meta_at("kind"));
  }
}

stage1::Stage1Model stage1_shell(std::size_t patch, std::size_t width, std::size_t blocks, std::size_t refine) {
  nc::Rng rng(0);
  return stage1::Stage1Model::init({patch, width, blocks}, refine, rng);
}

}  // namespace

std::string step_record_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["phase"] = r.phase;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["loss"] = r.loss;
  if (r.cls) j["cls"] = *r.cls;
  if (r.ctl) j["ctl"] = *r.ctl;
  return j.dump();
}

NamedParams named_params(const VisitAll& visit) {
  NamedParams out;
  visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

// ---- Stage 1 -----------------------------------------------------------------

Stage1Bundle Stage1Bundle::init(const TrainConfig& cfg, std::size_t patch_size) {
  nc::Rng rng(cfg.seed);
  Stage1Bundle b;
  b.patch_size = patch_size;
  b.refine_layers = cfg.refine_layers;
  b.model = stage1::Stage1Model::init({patch_size, cfg.encoder_width, cfg.encoder_blocks}, cfg.refine_layers, rng);
  return b;
}

Checkpoint Stage1Bundle::to_checkpoint() {
  Checkpoint c;
  collect_params(c, [this](const encoder::ParamVisitor& fn) { model.visit(fn); });
  c.meta["kind"] = "stage1";
  c.meta["patch_size"] = std::to_string(patch_size);
  c.meta["encoder_width"] = std::to_string(model.encoder.config.width);
  c.meta["encoder_blocks"] = std::to_string(model.encoder.config.blocks);
  c.meta["refine_layers"] = std::to_string(refine_layers);
  return c;
}

Stage1Bundle Stage1Bundle::from_checkpoint(const Checkpoint& c) {
  expect_kind(c, "stage1");
  Stage1Bundle b;
  b.patch_size = meta_size(c, "patch_size");
  b.refine_layers = meta_size(c, "refine_layers");
  b.model = stage1_shell(b.patch_size, meta_size(c, "encoder_width"), meta_size(c, "encoder_blocks"), b.refine_layers);
  restore_params(c, [&](const encoder::ParamVisitor& fn) { b.model.visit(fn); });
  return b;
}

Stage1Bundle run_stage1(const TrainConfig& cfg, const Samples& train, std::size_t patch_size, const StepObserver& observer) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("run_stage1: empty training split");
  Stage1Bundle b = Stage1Bundle::init(cfg, patch_size);
  const VisitAll visit = [&](const encoder::ParamVisitor& fn) { b.model.visit(fn); };
  visit([](const std::string&, Tensor& t) { t.requires_grad = true; });
  const stage1::HashTextEncoder text(cfg.encoder_width);
  AdamW opt(adamw_options(cfg));
  BatchSampler sampler(train.size(), cfg.seed ^ 0xb47c5ull);
  const auto params = named_params(visit);
  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    clear_grads(visit);
    std::vector<const encoder::ImageSample*> batch;
    for (auto i : sampler.next(std::min(cfg.batch_size, train.size()))) batch.push_back(&train[i]);
    nc::Tape tape;
    nc::Bindings bind(tape);
    auto out = stage1::stage1_loss(bind, b.model, batch, text, cfg.tau);
    tape.backward(out.total);
    const double lr = lr_at(step, cfg);
    opt.step(params, lr);
    StepRecord rec{"stage1", step, lr, out.total.value().data[0], out.cls.value().data[0], out.ctl.value().data[0]};
    if (observer && !observer(rec)) break;
  }
  clear_grads(visit);
  return b;
}

double macro_f1(stage1::Stage1Model& model, const Samples& samples) {
  std::map<std::string, eval::LabelVector> pred, truth;
  for (const auto& s : samples) {
    const auto f = stage1::extract_features(model, s);
    eval::LabelVector p, t;
    for (std::size_t k = 0; k < kNumDiseases; ++k) {
      p[k] = f.logits[k] > 0.0 ? eval::Mention::positive : eval::Mention::absent;
      t[k] = s.labels[k] ? eval::Mention::positive : eval::Mention::absent;
    }
    pred[s.study_id] = p;
    truth[s.study_id] = t;
  }
  return eval::clinical_prf(pred, truth).macro.f1;
}

dmsr::ExemplarIndex build_index(stage1::Stage1Model& model, const Samples& train, double lambda) {
  dmsr::ExemplarIndex index(model.encoder.config.width, lambda);
  for (const auto& s : train) {
    const auto f = stage1::extract_features(model, s);
    dmsr::ExemplarRecord r;
    r.study_id = s.study_id;
    r.z_bar = f.z_bar;
    std::copy(f.logits.begin(), f.logits.end(), r.logits.begin());
    r.report = s.report;
    index.add(std::move(r));
  }
  return index;
}

// ---- Stage 2 -----------------------------------------------------------------

Stage2Model Stage2Model::init(const TrainConfig& cfg, Stage1Bundle s1, const Samples& train) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("stage 2: empty training split");
  Stage2Model m;
  m.s1 = std::move(s1.model);
  m.patch_size = s1.patch_size;
  m.refine_layers = s1.refine_layers;
  std::vector<std::string> corpus;
  for (const auto& s : train) corpus.push_back(s.report);
  m.vocab = gen::Vocabulary::build(corpus);
  const std::size_t grid_h = train.front().height / m.patch_size, grid_w = train.front().width / m.patch_size;
  nc::Rng rng(cfg.seed ^ 0x57a6e2ull);
  m.fusion = dvaf::FusionParams::init(m.s1.encoder.config.width, cfg.decoder_width, rng);
  gen::DecoderConfig dc;
  dc.vocab_size = m.vocab.size();
  dc.width = cfg.decoder_width;
  dc.heads = cfg.decoder_heads;
  dc.blocks = cfg.decoder_blocks;
  dc.ffn_width = cfg.decoder_ffn;
  dc.max_text_tokens = cfg.max_text_tokens;
  dc.max_prefix_rows = grid_h * grid_w + kNumDiseases;
  m.decoder = gen::DecoderParams::init(dc, rng);
  m.fusion_mode = cfg.use_dast_dvaf ? dvaf::parse_fusion_mode(cfg.fusion) : dvaf::FusionMode::none;
  m.gate = dvaf::parse_gate_mode(cfg.gate);
  m.use_dmsr = cfg.use_dmsr;
  m.lambda = cfg.lambda;
  m.space = cfg.logit_space == "probability" ? dmsr::LogitSpace::probability : dmsr::LogitSpace::raw;
  m.max_gen_len = cfg.max_gen_len;
  return m;
}

void Stage2Model::visit(const encoder::ParamVisitor& fn) {
  s1.visit(fn);
  fusion.visit(fn);
  decoder.visit(fn);
}

Checkpoint Stage2Model::to_checkpoint() {
  Checkpoint c;
  collect_params(c, visitor());
  const auto& dc = decoder.config;
  c.meta["kind"] = "stage2";
  c.meta["patch_size"] = std::to_string(patch_size);
  c.meta["encoder_width"] = std::to_string(s1.encoder.config.width);
  c.meta["encoder_blocks"] = std::to_string(s1.encoder.config.blocks);
  c.meta["refine_layers"] = std::to_string(refine_layers);
  c.meta["decoder_width"] = std::to_string(dc.width);
  c.meta["decoder_heads"] = std::to_string(dc.heads);
  c.meta["decoder_blocks"] = std::to_string(dc.blocks);
  c.meta["decoder_ffn"] = std::to_string(dc.ffn_width);
  c.meta["max_text_tokens"] = std::to_string(dc.max_text_tokens);
  c.meta["max_prefix_rows"] = std::to_string(dc.max_prefix_rows);
  std::string words;
  for (const auto& w : vocab.words()) words += w + "\n";
  c.meta["vocabulary"] = words;
  c.meta["fusion"] = dvaf::to_string(fusion_mode);
  c.meta["gate"] = dvaf::to_string(gate);
  c.meta["use_dmsr"] = use_dmsr ? "true" : "false";
  c.meta["lambda"] = fmt_real(lambda);
  c.meta["logit_space"] = space == dmsr::LogitSpace::probability ? "probability" : "raw";
  c.meta["max_gen_len"] = std::to_string(max_gen_len);
  return c;
}

Stage2Model Stage2Model::from_checkpoint(const Checkpoint& c) {
  expect_kind(c, "stage2");
  Stage2Model m;
  m.patch_size = meta_size(c, "patch_size");
  m.refine_layers = meta_size(c, "refine_layers");
  const std::size_t width = meta_size(c, "encoder_width");
  m.s1 = stage1_shell(m.patch_size, width, meta_size(c, "encoder_blocks"), m.refine_layers);
  std::vector<std::string> words;
  std::istringstream in(c.meta_at("vocabulary"));
  for (std::string w; std::getline(in, w);) words.push_back(w);
  try {
    m.vocab = gen::Vocabulary::from_words(words);
    gen::DecoderConfig dc;
    dc.vocab_size = m.vocab.size();
    dc.width = meta_size(c, "decoder_width");
    dc.heads = meta_size(c, "decoder_heads");
    dc.blocks = meta_size(c, "decoder_blocks");
    dc.ffn_width = meta_size(c, "decoder_ffn");
    dc.max_text_tokens = meta_size(c, "max_text_tokens");
    dc.max_prefix_rows = meta_size(c, "max_prefix_rows");
    nc::Rng rng(0);
    m.fusion = dvaf::FusionParams::init(width, dc.width, rng);
    m.decoder = gen::DecoderParams::init(dc, rng);
    m.fusion_mode = dvaf::parse_fusion_mode(c.meta_at("fusion"));
    m.gate = dvaf::parse_gate_mode(c.meta_at("gate"));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  m.use_dmsr = c.meta_at("use_dmsr") == "true";
  m.lambda = meta_real(c, "lambda");
  m.space = c.meta_at("logit_space") == "probability" ? dmsr::LogitSpace::probability : dmsr::LogitSpace::raw;
  m.max_gen_len = meta_size(c, "max_gen_len");
  restore_params(c, m.visitor());
  return m;
}

namespace {

gen::FreezeMask mask_with_prefixes(Stage2Model& model, std::initializer_list<const char*> trainable) {
  gen::FreezeMask mask;
  model.visit([&](const std::string& name, Tensor&) {
    bool on = false;
    for (const char* p : trainable) on = on || name.rfind(p, 0) == 0;
    mask[name] = on;
  });
  return mask;
}

}  // namespace

gen::FreezeMask stage2_freeze_mask(Stage2Model& model) { return mask_with_prefixes(model, {"proj."}); }

gen::FreezeMask pretrain_freeze_mask(Stage2Model& model) { return mask_with_prefixes(model, {"decoder."}); }

gen::FreezeMask align_freeze_mask(Stage2Model& model) { return mask_with_prefixes(model, {"fusion.", "proj."}); }

const dmsr::ExemplarRecord* retrieve_exemplar(const Stage2Model& model, const dmsr::ExemplarIndex* index,
                                              const stage1::Stage1Features& feats, const std::string& study_id) {
  if (!model.use_dmsr) return nullptr;
  if (!index) throw std::invalid_argument("retrieval is enabled but no exemplar index was given");
  dmsr::QueryOptions opts;
  opts.lambda = model.lambda;
  opts.k = 1;
  opts.exclude_id = study_id;
  opts.space = model.space;
  const auto hits = index->query(feats.z_bar, feats.logits, opts);
  if (hits.empty()) return nullptr;
  return &index->records()[hits.front().position];
}

gen::LmLoss stage2_sample_loss(nc::Bindings& bind, Stage2Model& model, const encoder::ImageSample& sample,
                               const std::string& retrieved) {
  Var z = encoder::encode(bind, sample, model.s1.encoder);
  Var prefix = dvaf::visual_prefix(bind, model.s1.bank, z, model.fusion, model.fusion_mode, model.gate);
  const auto target = model.vocab.tokenize(sample.report);
  const auto prompt = gen::assemble_prompt(model.vocab, retrieved, prefix, target, model.decoder.config);
  return gen::lm_loss(bind, model.decoder, prompt);
}

Tensor projected_prefix(Stage2Model& model, const encoder::ImageSample& sample) {
  nc::Tape tape;
  nc::Bindings bind(tape);
  Var z = encoder::encode(bind, sample, model.s1.encoder);
  Var prefix = dvaf::visual_prefix(bind, model.s1.bank, z, model.fusion, model.fusion_mode, model.gate);
  return Tensor(prefix.shape(), prefix.value().data);
}

namespace {

std::vector<std::string> retrieved_reports(Stage2Model& model, const Samples& samples, const dmsr::ExemplarIndex* index) {
  std::vector<std::string> out;
  for (const auto& s : samples) {
    if (!model.use_dmsr) {
      out.emplace_back();
      continue;
    }
    const auto* ex = retrieve_exemplar(model, index, stage1::extract_features(model.s1, s), s.study_id);
    out.push_back(ex ? ex->report : std::string());
  }
  return out;
}

using SampleLoss = std::function<gen::LmLoss(nc::Bindings&, std::size_t)>;

void train_phase(const char* phase, std::uint64_t salt, std::size_t steps, double base_lr, std::size_t warmup,
                 const TrainConfig& cfg, Stage2Model& model, const Samples& train, const SampleLoss& loss_of,
                 const StepObserver& observer) {
  const VisitAll visit = model.visitor();
  AdamW opt(adamw_options(cfg));
  BatchSampler sampler(train.size(), cfg.seed ^ salt);
  const auto params = named_params(visit);
  for (std::size_t step = 1; step <= steps; ++step) {
    clear_grads(visit);
    const auto idx = sampler.next(std::min(cfg.batch_size, train.size()));
    std::size_t tokens = 0;
    for (auto i : idx) tokens += gen::split_words(train[i].report).size() + 1;
    double loss_sum = 0.0;
    for (auto i : idx) {
      nc::Tape tape;
      nc::Bindings bind(tape);
      auto loss = loss_of(bind, i);
      loss_sum += loss.sum.value().data[0];
      tape.backward(nc::scale(loss.sum, 1.0 / static_cast<double>(tokens)));
    }
    const double lr = lr_at(step, base_lr, warmup, steps);
    opt.step(params, lr);
    StepRecord rec{phase, step, lr, loss_sum / static_cast<double>(tokens), std::nullopt, std::nullopt};
    if (observer && !observer(rec)) break;
  }
  clear_grads(visit);
}

void check_stage2_inputs(const TrainConfig& cfg, const Stage2Model& model, const Samples& train,
                         const dmsr::ExemplarIndex* index) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("run_stage2: empty training split");
  if (model.use_dmsr) {
    if (!index) throw std::invalid_argument("run_stage2: retrieval is enabled but no exemplar index was given");
    if (index->width() != model.s1.encoder.config.width) {
      throw std::invalid_argument("run_stage2: index width " + std::to_string(index->width()) +
                                  " does not match encoder width " + std::to_string(model.s1.encoder.config.width));
    }
  }
}

}  // namespace

std::vector<std::size_t> text_neighbours(const Samples& train) {
  std::vector<std::vector<std::string>> bags;
  for (const auto& s : train) {
    auto w = gen::split_words(s.report);
    std::sort(w.begin(), w.end());
    w.erase(std::unique(w.begin(), w.end()), w.end());
    bags.push_back(std::move(w));
  }
  std::vector<std::size_t> out(train.size(), train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    double best = -1.0;
    for (std::size_t j = 0; j < train.size(); ++j) {
      if (j == i) continue;
      std::vector<std::string> common;
      std::set_intersection(bags[i].begin(), bags[i].end(), bags[j].begin(), bags[j].end(), std::back_inserter(common));
      const std::size_t uni = bags[i].size() + bags[j].size() - common.size();
      const double score = uni ? static_cast<double>(common.size()) / static_cast<double>(uni) : 1.0;
      if (score > best || (score == best && train[j].study_id < train[out[i]].study_id)) {
        best = score;
        out[i] = j;
      }
    }
  }
  return out;
}

void pretrain_decoder(const TrainConfig& cfg, Stage2Model& model, const Samples& train, const StepObserver& observer) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("pretrain_decoder: empty corpus");
  if (cfg.pretrain_steps == 0) return;
  const auto neighbour = text_neighbours(train);
  gen::apply_freeze(model.visitor(), pretrain_freeze_mask(model));
  // Every other document carries its closest other report in front, so the
  // frozen decoder knows how to use an in-context example later on.
  std::size_t slot = 0;
  const SampleLoss loss_of = [&](nc::Bindings& bind, std::size_t i) {
    const bool with_context = (slot++ % 2 == 1) && neighbour[i] < train.size();
    const std::string context = with_context ? train[neighbour[i]].report : std::string();
    const auto prompt = gen::text_prompt(model.vocab, context, model.vocab.tokenize(train[i].report), model.decoder.config);
    return gen::lm_loss(bind, model.decoder, prompt);
  };
  train_phase("pretrain", 0x3a11, cfg.pretrain_steps, cfg.pretrain_lr, cfg.pretrain_warmup, cfg, model, train, loss_of,
              observer);
}

void run_stage2(const TrainConfig& cfg, Stage2Model& model, const Samples& train, const dmsr::ExemplarIndex* index,
                const StepObserver& observer) {
  check_stage2_inputs(cfg, model, train, index);
  pretrain_decoder(cfg, model, train, observer);
  const auto retrieved = retrieved_reports(model, train, index);
  const SampleLoss loss_of = [&](nc::Bindings& bind, std::size_t i) {
    return stage2_sample_loss(bind, model, train[i], retrieved[i]);
  };
  if (cfg.align_steps > 0) {
    gen::apply_freeze(model.visitor(), align_freeze_mask(model));
    train_phase("align", 0xa119, cfg.align_steps, cfg.align_lr, cfg.align_warmup, cfg, model, train, loss_of, observer);
  }
  gen::apply_freeze(model.visitor(), stage2_freeze_mask(model));
  train_phase("stage2", 0x5e2, cfg.total_steps, cfg.base_lr, cfg.warmup_steps, cfg, model, train, loss_of, observer);
}

double mean_token_loss(Stage2Model& model, const Samples& samples, const dmsr::ExemplarIndex* index) {
  const auto retrieved = retrieved_reports(model, samples, index);
  double sum = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    nc::Tape tape;
    nc::Bindings bind(tape);
    const auto loss = stage2_sample_loss(bind, model, samples[i], retrieved[i]);
    sum += loss.sum.value().data[0];
    tokens += loss.tokens;
  }
  return tokens ? sum / static_cast<double>(tokens) : 0.0;
}

std::vector<GeneratedReport> generate_reports(Stage2Model& model, const Samples& samples, const dmsr::ExemplarIndex* index) {
  std::vector<const encoder::ImageSample*> order;
  for (const auto& s : samples) order.push_back(&s);
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->study_id < b->study_id; });
  std::vector<GeneratedReport> out;
  for (const auto* s : order) {
    GeneratedReport r;
    r.study_id = s->study_id;
    r.reference = s->report;
    std::string context;
    if (model.use_dmsr) {
      const auto* ex = retrieve_exemplar(model, index, stage1::extract_features(model.s1, *s), s->study_id);
      if (ex) {
        context = ex->report;
        r.retrieved_id = ex->study_id;
      }
    }
    r.hypothesis = gen::generate(model.decoder, model.vocab, context, projected_prefix(model, *s), model.max_gen_len);
    out.push_back(std::move(r));
  }
  return out;
}

std::string reports_jsonl(const std::vector<GeneratedReport>& reports) {
  std::string out;
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["study_id"] = r.study_id;
    j["hypothesis"] = r.hypothesis;
    j["reference"] = r.reference;
    j["retrieved_id"] = r.retrieved_id;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace dast::pipeline
