#pragma once

// Experiment wiring shared by the CLI and the acceptance suite: default
// backbones, model construction, and the two training drivers.

#include <cstdint>
#include <functional>

#include "dkt/baselines.hpp"
#include "dkt/gp.hpp"
#include "dkt/kernels.hpp"
#include "dkt/tasks.hpp"
#include "dkt/trainer.hpp"

namespace dkt {

struct DktModel {
  KernelSpec kernel;
  Backbone backbone;

  DktModel clone(bool requires_grad) const {
    return {kernel.clone(requires_grad), backbone.clone(requires_grad)};
  }
};

inline MlpConfig sine_backbone_config(std::uint64_t seed) {
  return MlpConfig{1, {40, 40}, 40, Activation::ReLU, seed};
}

inline MlpConfig classification_backbone_config(std::uint64_t seed) {
  return MlpConfig{2, {40, 40}, 16, Activation::ReLU, seed};
}

inline DktModel make_sine_dkt_model(KernelFamily family, std::uint64_t seed) {
  MlpConfig cfg = sine_backbone_config(seed);
  return {KernelSpec::make(family, cfg.output_dim, true), Backbone::make(cfg)};
}

inline DktModel make_classification_dkt_model(KernelFamily family, std::uint64_t seed) {
  MlpConfig cfg = classification_backbone_config(seed);
  return {KernelSpec::make(family, cfg.output_dim, true), Backbone::make(cfg)};
}

inline TrainOutcome train_sine_dkt(DktModel& model, const SineTaskConfig& tasks,
                                   const TrainConfig& cfg) {
  std::function<RegressionTask(long)> source = [tasks](long i) {
    return sample_sine_task(tasks, SineMode::Train, rng_stream::kTrainTasks,
                            static_cast<std::uint64_t>(i));
  };
  return train_dkt<RegressionTask>(source, model.kernel, &model.backbone, cfg);
}

struct ClassificationProtocol {
  int ways = 5;
  int shots = 1;
  int query_per_class = 16;
  long validation_episodes = 50;
};

// Episodic training with best-on-validation model selection; validation
// episodes come from the training classes on a reserved stream.
inline TrainOutcome train_classification_dkt(DktModel& model, const SyntheticFamilyConfig& family,
                                             const ClassificationProtocol& proto,
                                             TrainConfig cfg) {
  std::function<ClassificationTask(long)> source = [family, proto](long i) {
    return sample_classification_task(family, proto.ways, proto.shots, proto.query_per_class,
                                      ClassSplit::Train, rng_stream::kTrainTasks,
                                      static_cast<std::uint64_t>(i));
  };
  if (cfg.eval_every == 0) cfg.eval_every = 1000;
  std::function<double()> validate = [&model, family, proto] {
    return evaluate_classification(model.kernel, &model.backbone, family, proto.ways, proto.shots,
                                   proto.query_per_class, ClassSplit::Train,
                                   proto.validation_episodes, 1, false,
                                   rng_stream::kCalibration)
        .mean_accuracy;
  };
  return train_dkt<ClassificationTask>(source, model.kernel, &model.backbone, cfg, validate);
}

}  // namespace dkt
