#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mkd/data_synth.hpp"
#include "mkd/tensor.hpp"
#include "mkd/trainer.hpp"

namespace mkd {

enum class ModelTag { syn, real, ensemble, baseline, fine_tune, joint };
enum class Aggregation { micro, macro };

std::string to_string(ModelTag t);
ModelTag parse_model_tag(const std::string& s);
std::string to_string(Aggregation a);
Aggregation parse_aggregation(const std::string& s);

/// 2|P ∩ G| / (|P| + |G|) for one class; 1 when the class is absent from both.
/// Throws InputError on shape mismatch or class_id outside [0, num_classes).
double dice_coefficient(const LabelMap& pred, const LabelMap& truth, int class_id, int num_classes);

/// Pixel counts behind the per-class Dice.
struct OverlapCounts {
  std::vector<std::int64_t> intersection;
  std::vector<std::int64_t> predicted;
  std::vector<std::int64_t> truth;

  explicit OverlapCounts(int num_classes = 0);
  int num_classes() const { return static_cast<int>(intersection.size()); }
  void add(const LabelMap& pred, const LabelMap& truth);
  double dice(int class_id) const;
};

struct DiceReport {
  std::vector<double> per_class;  ///< indexed by class, background at 0
  double mean = 0.0;              ///< mean over foreground classes
  double background = 0.0;
  ModelTag model_tag = ModelTag::ensemble;
  std::string dataset_id;
  Aggregation aggregation = Aggregation::micro;

  /// Recomputes mean and background from per_class.
  void finalize();
};

/// Average of the two probability maps, then argmax with ties to the lowest class.
/// Throws ConfigError when the segmentors disagree on num_classes.
std::pair<ProbabilityMap, LabelMap> ensemble_predict(const Network& s_syn, const Network& s_real, const Image& x);

using PredictFn = std::function<LabelMap(const Image&)>;

/// Label predictor for a trained state: S_syn for `syn`, the ensemble for
/// `ensemble`, S_real for every other tag.
PredictFn predictor(const TrainerState& state, ModelTag tag);

/// Per-class Dice of `predict` over `ds`. Throws InputError on an empty dataset.
DiceReport evaluate_model(const PredictFn& predict, const Dataset& ds, ModelTag tag = ModelTag::ensemble,
                          const std::string& dataset_id = "", Aggregation aggregation = Aggregation::micro);

/// Train / test split for one phantom experiment.
struct ExperimentData {
  Dataset target_train;
  Dataset assistant_train;
  Dataset target_test;
  std::string id;
};

struct ExperimentSpec {
  int image_size = 64;
  int num_classes = 4;
  int target_count = 40;
  int assistant_count = 40;
  int test_count = 20;
  std::uint64_t seed = 0;
  bool swap_styles = false;  ///< style A becomes the target modality
};

/// Unpaired phantoms: the assistant, target and test sets never share a sample seed.
ExperimentData make_phantom_experiment(const ExperimentSpec& spec);

enum class AblationSuite { no_iam, kd_s2r_only, kd_r2s_only, full };
std::string to_string(AblationSuite s);
AblationSuite parse_ablation_suite(const std::string& s);

struct VariantResult {
  std::string variant;
  std::vector<DiceReport> reports;
};

/// Reports for the tags a trained mode produces: syn/real/ensemble for the
/// two-segmentor modes, a single report otherwise.
std::vector<DiceReport> evaluate_state(const TrainerState& state, TrainingMode mode, const Dataset& test,
                                       const std::string& dataset_id, Aggregation aggregation = Aggregation::micro);

/// Trains `cfg` in `mode` on `data` and evaluates it on the held-out split.
VariantResult run_variant(TrainingMode mode, const ExperimentData& data, TrainingConfig cfg);

/// `full` trains the complete method and the three ablations.
std::vector<VariantResult> run_ablation(AblationSuite suite, const ExperimentData& data, const TrainingConfig& cfg);

struct SweepRow {
  int assistant_count = 0;
  DiceReport ensemble;
};

/// One full training per count using the first `count` assistant samples.
/// Throws ConfigError when a count is < 1 or exceeds the assistant set.
std::vector<SweepRow> run_assistant_sweep(const std::vector<int>& counts, const ExperimentData& data,
                                          const TrainingConfig& cfg);

/// CSV with one row per (model_tag, class).
void write_reports_csv(const std::vector<DiceReport>& reports, const std::filesystem::path& file);
std::vector<DiceReport> read_reports_csv(const std::filesystem::path& file);
/// key=value text, one line per report.
std::string summarize_reports(const std::vector<DiceReport>& reports);

/// Static SVG charts.
std::string loss_curve_svg(const std::vector<MetricsRecord>& metrics, const std::vector<std::string>& fields,
                           int smoothing_window = 1);
std::string dice_bar_svg(const std::vector<DiceReport>& reports);

}  // namespace mkd
