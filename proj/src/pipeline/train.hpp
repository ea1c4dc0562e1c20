#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dmsr/dmsr.hpp"
#include "dvaf/dvaf.hpp"
#include "generator/decoder.hpp"
#include "pipeline/checkpoint.hpp"
#include "pipeline/config.hpp"
#include "pipeline/optimizer.hpp"
#include "stage1/stage1.hpp"

namespace dast::pipeline {

using Samples = std::vector<encoder::ImageSample>;

struct StepRecord {
  std::string phase;  // "stage1", "pretrain", "align" or "stage2"
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> cls;
  std::optional<double> ctl;
};

// Called after every optimizer step; returning false ends the current phase.
using StepObserver = std::function<bool(const StepRecord&)>;

std::string step_record_json(const StepRecord& r);

// Visits every parameter and collects those that are trainable.
NamedParams named_params(const VisitAll& visit);

// ---- Stage 1 -----------------------------------------------------------------

struct Stage1Bundle {
  stage1::Stage1Model model;
  std::size_t patch_size = 4;
  std::size_t refine_layers = 1;

  static Stage1Bundle init(const TrainConfig& cfg, std::size_t patch_size);
  Checkpoint to_checkpoint();
  static Stage1Bundle from_checkpoint(const Checkpoint& ckpt);
};

Stage1Bundle run_stage1(const TrainConfig& cfg, const Samples& train, std::size_t patch_size,
                        const StepObserver& observer = {});

// Sigmoid(logit) > 0.5 against the labels; per-category positive-class F1,
// averaged over the 14 categories.
double macro_f1(stage1::Stage1Model& model, const Samples& samples);

// One exemplar per study: pooled features, logits, report.
dmsr::ExemplarIndex build_index(stage1::Stage1Model& model, const Samples& train, double lambda = 0.5);

// ---- Stage 2 -----------------------------------------------------------------

struct Stage2Model {
  stage1::Stage1Model s1;
  std::size_t patch_size = 4;
  std::size_t refine_layers = 1;
  dvaf::FusionParams fusion;
  gen::DecoderParams decoder;
  gen::Vocabulary vocab;
  dvaf::FusionMode fusion_mode = dvaf::FusionMode::dvaf;
  dvaf::GateMode gate = dvaf::GateMode::linear;
  bool use_dmsr = true;
  double lambda = 0.5;
  dmsr::LogitSpace space = dmsr::LogitSpace::raw;
  std::size_t max_gen_len = 64;

  // Fresh fusion/projection/decoder around a trained Stage-1 model.
  static Stage2Model init(const TrainConfig& cfg, Stage1Bundle s1, const Samples& train);
  void visit(const encoder::ParamVisitor& fn);
  VisitAll visitor() {
    return [this](const encoder::ParamVisitor& fn) { visit(fn); };
  }

  Checkpoint to_checkpoint();
  static Stage2Model from_checkpoint(const Checkpoint& ckpt);
};

// Only the projection path is trainable.
gen::FreezeMask stage2_freeze_mask(Stage2Model& model);
// Decoder only, for language-model pretraining.
gen::FreezeMask pretrain_freeze_mask(Stage2Model& model);
// Fusion and projection, with the decoder and Stage-1 components frozen.
gen::FreezeMask align_freeze_mask(Stage2Model& model);

// Best other training study for the in-context example; nullptr when
// retrieval is off or nothing else is stored.
const dmsr::ExemplarRecord* retrieve_exemplar(const Stage2Model& model, const dmsr::ExemplarIndex* index,
                                              const stage1::Stage1Features& feats, const std::string& study_id);

// Per-token LM loss of one study; Σ over tokens, plus the token count.
gen::LmLoss stage2_sample_loss(nc::Bindings& bind, Stage2Model& model, const encoder::ImageSample& sample,
                               const std::string& retrieved);

// Projected visual prefix as a plain tensor.
nc::Tensor projected_prefix(Stage2Model& model, const encoder::ImageSample& sample);

// For each study, the other study whose report shares the most words
// (Jaccard over word sets, ties to the lowest id).
std::vector<std::size_t> text_neighbours(const Samples& train);

// Text-only language-model training of the decoder on the training reports
// for cfg.pretrain_steps; half of the documents carry a neighbouring report as
// context. No-op when pretrain_steps is 0.
void pretrain_decoder(const TrainConfig& cfg, Stage2Model& model, const Samples& train,
                      const StepObserver& observer = {});

// Decoder pretraining, then fusion+projection alignment (if align_steps > 0),
// then the projection-only phase over cfg.total_steps. Requires an index when
// use_dmsr.
void run_stage2(const TrainConfig& cfg, Stage2Model& model, const Samples& train, const dmsr::ExemplarIndex* index,
                const StepObserver& observer = {});

// Mean per-token loss of the whole set under the current parameters.
double mean_token_loss(Stage2Model& model, const Samples& samples, const dmsr::ExemplarIndex* index);

struct GeneratedReport {
  std::string study_id;
  std::string hypothesis;
  std::string reference;
  std::string retrieved_id;
};

// Greedy reports in study-id order.
std::vector<GeneratedReport> generate_reports(Stage2Model& model, const Samples& samples, const dmsr::ExemplarIndex* index);
std::string reports_jsonl(const std::vector<GeneratedReport>& reports);

}  // namespace dast::pipeline
