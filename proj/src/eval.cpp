#include "mkd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "mkd/errors.hpp"

namespace mkd {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

std::string to_string(ModelTag t) {
  switch (t) {
    case ModelTag::syn: return "syn";
    case ModelTag::real: return "real";
    case ModelTag::ensemble: return "ensemble";
    case ModelTag::baseline: return "baseline";
    case ModelTag::fine_tune: return "fine_tune";
    case ModelTag::joint: return "joint";
  }
  return "?";
}

ModelTag parse_model_tag(const std::string& s) {
  for (ModelTag t : {ModelTag::syn, ModelTag::real, ModelTag::ensemble, ModelTag::baseline, ModelTag::fine_tune,
                     ModelTag::joint}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("unknown model tag '" + s + "'");
}

std::string to_string(Aggregation a) { return a == Aggregation::micro ? "micro" : "macro"; }

Aggregation parse_aggregation(const std::string& s) {
  if (s == "micro") return Aggregation::micro;
  if (s == "macro") return Aggregation::macro;
  throw ConfigError("unknown aggregation '" + s + "' (expected micro or macro)");
}

OverlapCounts::OverlapCounts(int num_classes)
    : intersection(static_cast<std::size_t>(num_classes), 0),
      predicted(static_cast<std::size_t>(num_classes), 0),
      truth(static_cast<std::size_t>(num_classes), 0) {}

void OverlapCounts::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height() != gt.height() || pred.width() != gt.width()) {
    throw InputError("dice: prediction " + std::to_string(pred.height()) + "x" + std::to_string(pred.width()) +
                     " vs truth " + std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
  }
  const int c = num_classes();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i];
    const int g = gt[i];
    if (p >= c || g >= c) throw InputError("dice: label " + std::to_string(std::max(p, g)) + " >= num_classes");
    ++predicted[static_cast<std::size_t>(p)];
    ++truth[static_cast<std::size_t>(g)];
    if (p == g) ++intersection[static_cast<std::size_t>(p)];
  }
}

double OverlapCounts::dice(int class_id) const {
  if (class_id < 0 || class_id >= num_classes()) {
    throw InputError("dice: class " + std::to_string(class_id) + " outside [0, " + std::to_string(num_classes()) + ")");
  }
  const auto k = static_cast<std::size_t>(class_id);
  const std::int64_t denom = predicted[k] + truth[k];
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(intersection[k]) / static_cast<double>(denom);
}

double dice_coefficient(const LabelMap& pred, const LabelMap& truth, int class_id, int num_classes) {
  if (num_classes < 1 || num_classes > 256) throw InputError("dice: num_classes out of range");
  if (class_id < 0 || class_id >= num_classes) {
    throw InputError("dice: class " + std::to_string(class_id) + " outside [0, " + std::to_string(num_classes) + ")");
  }
  if (pred.height() != truth.height() || pred.width() != truth.width()) {
    throw InputError("dice: label maps differ in shape");
  }
  std::int64_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == class_id;
    const bool g = truth[i] == class_id;
    np += p;
    ng += g;
    inter += p && g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

void DiceReport::finalize() {
  if (per_class.empty()) throw InputError("dice report without classes");
  background = per_class[0];
  if (per_class.size() == 1) {
    mean = background;
    return;
  }
  double s = 0.0;
  for (std::size_t k = 1; k < per_class.size(); ++k) s += per_class[k];
  mean = s / static_cast<double>(per_class.size() - 1);
}

std::pair<ProbabilityMap, LabelMap> ensemble_predict(const Network& s_syn, const Network& s_real, const Image& x) {
  if (s_syn.spec().num_classes != s_real.spec().num_classes) {
    throw ConfigError("ensemble: segmentors disagree on num_classes (" + std::to_string(s_syn.spec().num_classes) +
                      " vs " + std::to_string(s_real.spec().num_classes) + ")");
  }
  ProbabilityMap a = segment(s_syn, x);
  const ProbabilityMap b = segment(s_real, x);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.5 * (a[i] + b[i]);
  LabelMap labels = argmax(a);
  return {std::move(a), std::move(labels)};
}

PredictFn predictor(const TrainerState& state, ModelTag tag) {
  const Network* s_syn = &state.net(NetId::s_syn);
  const Network* s_real = &state.net(NetId::s_real);
  switch (tag) {
    case ModelTag::syn: return [s_syn](const Image& x) { return argmax(segment(*s_syn, x)); };
    case ModelTag::ensemble:
      return [s_syn, s_real](const Image& x) { return ensemble_predict(*s_syn, *s_real, x).second; };
    default: return [s_real](const Image& x) { return argmax(segment(*s_real, x)); };
  }
}

DiceReport evaluate_model(const PredictFn& predict, const Dataset& ds, ModelTag tag, const std::string& dataset_id,
                          Aggregation aggregation) {
  if (ds.size() == 0) throw InputError("evaluate: empty dataset");
  const int c = ds.num_classes;
  DiceReport r;
  r.model_tag = tag;
  r.dataset_id = dataset_id;
  r.aggregation = aggregation;
  OverlapCounts total(c);
  std::vector<double> macro(static_cast<std::size_t>(c), 0.0);
  for (const LabeledSample& s : ds.samples) {
    const LabelMap pred = predict(s.image);
    if (aggregation == Aggregation::micro) {
      total.add(pred, s.label);
    } else {
      OverlapCounts one(c);
      one.add(pred, s.label);
      for (int k = 0; k < c; ++k) macro[static_cast<std::size_t>(k)] += one.dice(k);
    }
  }
  r.per_class.resize(static_cast<std::size_t>(c));
  for (int k = 0; k < c; ++k) {
    r.per_class[static_cast<std::size_t>(k)] = aggregation == Aggregation::micro
                                                   ? total.dice(k)
                                                   : macro[static_cast<std::size_t>(k)] / static_cast<double>(ds.size());
  }
  r.finalize();
  return r;
}

ExperimentData make_phantom_experiment(const ExperimentSpec& spec) {
  const ModalityStyle target_style = spec.swap_styles ? ModalityStyle::A : ModalityStyle::B;
  const ModalityStyle assistant_style = spec.swap_styles ? ModalityStyle::B : ModalityStyle::A;
  const std::uint64_t geometry = derive_seed(spec.seed, "geometry");
  const PhantomSpec t = default_phantom_spec(target_style, spec.image_size, spec.num_classes, geometry);
  const PhantomSpec a = default_phantom_spec(assistant_style, spec.image_size, spec.num_classes, geometry);
  ExperimentData d;
  d.target_train = synthesize_dataset(t, spec.target_count, derive_seed(spec.seed, "target-train"), Modality::target);
  d.assistant_train =
      synthesize_dataset(a, spec.assistant_count, derive_seed(spec.seed, "assistant-train"), Modality::assistant);
  d.target_test = synthesize_dataset(t, spec.test_count, derive_seed(spec.seed, "target-test"), Modality::target);
  d.id = std::string("phantom-") + to_string(target_style) + "-seed" + std::to_string(spec.seed);
  return d;
}

std::string to_string(AblationSuite s) {
  switch (s) {
    case AblationSuite::no_iam: return "no_iam";
    case AblationSuite::kd_s2r_only: return "kd_s2r_only";
    case AblationSuite::kd_r2s_only: return "kd_r2s_only";
    case AblationSuite::full: return "full";
  }
  return "?";
}

AblationSuite parse_ablation_suite(const std::string& s) {
  for (AblationSuite a : {AblationSuite::no_iam, AblationSuite::kd_s2r_only, AblationSuite::kd_r2s_only,
                          AblationSuite::full}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown ablation suite '" + s + "'");
}

std::vector<DiceReport> evaluate_state(const TrainerState& state, TrainingMode mode, const Dataset& test,
                                       const std::string& dataset_id, Aggregation aggregation) {
  if (single_segmentor_mode(mode)) {
    const ModelTag tag = mode == TrainingMode::baseline    ? ModelTag::baseline
                         : mode == TrainingMode::fine_tune ? ModelTag::fine_tune
                                                           : ModelTag::joint;
    return {evaluate_model(predictor(state, tag), test, tag, dataset_id, aggregation)};
  }
  std::vector<DiceReport> out;
  for (ModelTag tag : {ModelTag::syn, ModelTag::real, ModelTag::ensemble}) {
    out.push_back(evaluate_model(predictor(state, tag), test, tag, dataset_id, aggregation));
  }
  return out;
}

VariantResult run_variant(TrainingMode mode, const ExperimentData& data, TrainingConfig cfg) {
  cfg.mode = mode;
  const TrainingResult r = run_training(data.target_train, data.assistant_train, cfg);
  return {to_string(mode), evaluate_state(r.state, mode, data.target_test, data.id)};
}

std::vector<VariantResult> run_ablation(AblationSuite suite, const ExperimentData& data, const TrainingConfig& cfg) {
  std::vector<TrainingMode> modes;
  switch (suite) {
    case AblationSuite::no_iam: modes = {TrainingMode::no_iam}; break;
    case AblationSuite::kd_s2r_only: modes = {TrainingMode::kd_s2r_only}; break;
    case AblationSuite::kd_r2s_only: modes = {TrainingMode::kd_r2s_only}; break;
    case AblationSuite::full:
      modes = {TrainingMode::no_iam, TrainingMode::kd_s2r_only, TrainingMode::kd_r2s_only, TrainingMode::mkd};
      break;
  }
  std::vector<VariantResult> out;
  for (TrainingMode m : modes) out.push_back(run_variant(m, data, cfg));
  return out;
}

std::vector<SweepRow> run_assistant_sweep(const std::vector<int>& counts, const ExperimentData& data,
                                          const TrainingConfig& cfg) {
  for (int n : counts) {
    if (n < 1 || static_cast<std::size_t>(n) > data.assistant_train.size()) {
      throw ConfigError("sweep count " + std::to_string(n) + " outside [1, " +
                        std::to_string(data.assistant_train.size()) + "]");
    }
  }
  std::vector<SweepRow> rows;
  for (int n : counts) {
    ExperimentData subset = data;
    subset.assistant_train.samples.resize(static_cast<std::size_t>(n));
    TrainingConfig c = cfg;
    c.mode = TrainingMode::mkd;
    const TrainingResult r = run_training(subset.target_train, subset.assistant_train, c);
    rows.push_back({n, evaluate_model(predictor(r.state, ModelTag::ensemble), data.target_test, ModelTag::ensemble,
                                      data.id + "-assist" + std::to_string(n))});
  }
  return rows;
}

void write_reports_csv(const std::vector<DiceReport>& reports, const std::filesystem::path& file) {
  std::ofstream os(file);
  if (!os) throw InputError("cannot write " + file.string());
  os << "model_tag,dataset_id,aggregation,class,dice\n";
  for (const DiceReport& r : reports) {
    for (std::size_t k = 0; k < r.per_class.size(); ++k) {
      os << to_string(r.model_tag) << ',' << r.dataset_id << ',' << to_string(r.aggregation) << ',' << k << ','
         << fmt("%.17g", r.per_class[k]) << '\n';
    }
  }
  if (!os) throw InputError("failed writing " + file.string());
}

std::vector<DiceReport> read_reports_csv(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw FormatError("cannot open " + file.string());
  std::string line;
  std::getline(is, line);
  if (line != "model_tag,dataset_id,aggregation,class,dice") throw FormatError(file.string() + ": bad CSV header");
  std::vector<DiceReport> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (cols.size() != 5) throw FormatError(file.string() + ":" + std::to_string(lineno) + ": expected 5 columns");
    try {
      const ModelTag tag = parse_model_tag(cols[0]);
      const Aggregation agg = parse_aggregation(cols[2]);
      const std::size_t k = std::stoul(cols[3]);
      const double dice = std::stod(cols[4]);
      if (k == 0 || out.empty() || out.back().model_tag != tag || out.back().dataset_id != cols[1]) {
        out.emplace_back();
        out.back().model_tag = tag;
        out.back().dataset_id = cols[1];
        out.back().aggregation = agg;
      }
      if (k != out.back().per_class.size()) {
        throw FormatError(file.string() + ":" + std::to_string(lineno) + ": classes out of order");
      }
      out.back().per_class.push_back(dice);
    } catch (const std::logic_error&) {
      throw FormatError(file.string() + ":" + std::to_string(lineno) + ": malformed value");
    } catch (const ConfigError& e) {
      throw FormatError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  for (DiceReport& r : out) r.finalize();
  return out;
}

std::string summarize_reports(const std::vector<DiceReport>& reports) {
  std::string out;
  for (const DiceReport& r : reports) {
    out += "model_tag=" + to_string(r.model_tag) + " dataset=" + r.dataset_id +
           " aggregation=" + to_string(r.aggregation) + " mean_dice=" + fmt("%.6f", r.mean) +
           " background_dice=" + fmt("%.6f", r.background);
    for (std::size_t k = 1; k < r.per_class.size(); ++k) {
      out += " class" + std::to_string(k) + "=" + fmt("%.6f", r.per_class[k]);
    }
    out += '\n';
  }
  return out;
}

std::string loss_curve_svg(const std::vector<MetricsRecord>& metrics, const std::vector<std::string>& fields,
                           int smoothing_window) {
  constexpr double W = 720, H = 420, L = 60, R = 150, T = 30, B = 50;
  std::vector<std::vector<double>> series;
  for (const std::string& f : fields) {
    std::vector<double> raw;
    for (const MetricsRecord& m : metrics) raw.push_back(metric_value(m, f));
    std::vector<double> smooth(raw.size());
    const int w = std::max(1, smoothing_window);
    double acc = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      acc += raw[i];
      if (i >= static_cast<std::size_t>(w)) acc -= raw[i - static_cast<std::size_t>(w)];
      smooth[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(w)));
    }
    series.push_back(std::move(smooth));
  }
  double lo = 0.0, hi = 1e-12;
  for (const auto& s : series) {
    for (double v : s) {
      if (std::isfinite(v)) hi = std::max(hi, v);
    }
  }
  const std::size_t n = metrics.size();
  auto px = [&](std::size_t i) { return L + (W - L - R) * (n > 1 ? static_cast<double>(i) / (n - 1) : 0.0); };
  auto py = [&](double v) { return T + (H - T - B) * (1.0 - (v - lo) / (hi - lo)); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << L << "\" y=\"" << H - 15 << "\" font-size=\"12\">iteration (0.." << n << ")</text>\n";
  os << "<text x=\"5\" y=\"" << T << "\" font-size=\"12\">" << fmt("%.3g", hi) << "</text>\n";
  os << "<text x=\"5\" y=\"" << H - B << "\" font-size=\"12\">0</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* colour = kPalette[s % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[s].size(); ++i) {
      if (std::isfinite(series[s][i])) os << fmt("%.2f", px(i)) << ',' << fmt("%.2f", py(series[s][i])) << ' ';
    }
    os << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 18 * (s + 1) << "\" font-size=\"12\" fill=\"" << colour
       << "\">" << xml_escape(fields[s]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string dice_bar_svg(const std::vector<DiceReport>& reports) {
  constexpr double W = 720, H = 420, L = 60, T = 30, B = 90;
  const double bar = reports.empty() ? 0.0 : (W - L - 20) / static_cast<double>(reports.size());
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - 20 << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"5\" y=\"" << T + 4 << "\" font-size=\"12\">1.0</text>\n";
  os << "<text x=\"5\" y=\"" << H - B << "\" font-size=\"12\">0.0</text>\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const double v = std::clamp(reports[i].mean, 0.0, 1.0);
    const double h = (H - T - B) * v;
    const double x = L + bar * static_cast<double>(i) + bar * 0.1;
    os << "<rect x=\"" << fmt("%.2f", x) << "\" y=\"" << fmt("%.2f", H - B - h) << "\" width=\""
       << fmt("%.2f", bar * 0.8) << "\" height=\"" << fmt("%.2f", h) << "\" fill=\""
       << kPalette[i % std::size(kPalette)] << "\"/>\n";
    os << "<text x=\"" << fmt("%.2f", x) << "\" y=\"" << fmt("%.2f", H - B - h - 4) << "\" font-size=\"11\">"
       << fmt("%.3f", reports[i].mean) << "</text>\n";
    os << "<text x=\"" << fmt("%.2f", x) << "\" y=\"" << H - B + 16 << "\" font-size=\"10\" transform=\"rotate(30 "
       << fmt("%.2f", x) << ' ' << H - B + 16 << ")\">" << xml_escape(to_string(reports[i].model_tag) + " " +
                                                              reports[i].dataset_id)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace mkd
