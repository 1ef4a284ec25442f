#include "rad2ct/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "rad2ct/error.hpp"
#include "rad2ct/rvol.hpp"

namespace rad2ct {

namespace {

Extents3 extents_from(const std::vector<std::size_t>& v, const std::string& key) {
  if (v.size() != 3) throw UsageError("config: '" + key + "' expects depth,height,width");
  return {v[0], v[1], v[2]};
}

std::string padded(std::uint64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06llu", static_cast<unsigned long long>(index));
  return buf;
}

fs::path data_dir_of(const Config& cfg) { return cfg.get_string("data.dir", "data"); }

AutoencoderConfig ae_config(const Config& cfg, Stage stage) {
  return stage == Stage::vq2d ? AutoencoderConfig::from_config(cfg, "vq2d", AutoencoderConfig::desk_2d())
                              : AutoencoderConfig::from_config(cfg, "vq3d", AutoencoderConfig::desk_3d());
}

void check_extents(const Volume& v, const AutoencoderConfig& cfg, const fs::path& path) {
  if (v.extents != cfg.input) {
    throw DataError(path.string() + " has extents " + std::to_string(v.extents.depth) + "x" +
                    std::to_string(v.extents.height) + "x" + std::to_string(v.extents.width) +
                    " but the model expects " + std::to_string(cfg.input.depth) + "x" + std::to_string(cfg.input.height) +
                    "x" + std::to_string(cfg.input.width));
  }
  if (v.kind != ValueKind::normalized) throw DataError(path.string() + " is not a normalized volume");
}

std::vector<Volume> load_samples(const fs::path& dir, const std::vector<ManifestEntry>& entries,
                                 const std::vector<std::string>& kinds, const AutoencoderConfig& cfg) {
  std::vector<Volume> out;
  for (const auto& e : entries) {
    for (const auto& kind : kinds) {
      const auto path = sample_path(dir, kind, e.index);
      Volume v = read_rvol(path);
      check_extents(v, cfg, path);
      out.push_back(std::move(v));
    }
  }
  return out;
}

OptimizerHyper hyper_of(const RunConfig& run) {
  OptimizerHyper h;
  h.kind = run.optimizer;
  h.learning_rate = run.learning_rate;
  h.beta1 = run.beta1;
  h.beta2 = run.beta2;
  h.eps = run.eps;
  h.weight_decay = run.weight_decay;
  return h;
}

struct Schedule {
  std::uint64_t total = 1;
  std::uint64_t warmup = 0;
  RunConfig run;

  double at(std::uint64_t step) const {
    if (!run.cosine) return run.learning_rate;
    // steps are numbered from 1 so the first update is not a zero-rate warmup step
    return cosine_warmup_lr(step + 1, warmup, total, run.learning_rate);
  }
};

Schedule make_schedule(const RunConfig& run, std::size_t steps_per_epoch) {
  Schedule s;
  s.run = run;
  s.total = static_cast<std::uint64_t>(run.epochs * steps_per_epoch);
  s.warmup = static_cast<std::uint64_t>(std::floor(run.warmup_fraction * static_cast<double>(s.total)));
  if (s.warmup >= s.total) s.warmup = s.total - 1;
  return s;
}

void require_finite(double loss, Stage stage, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw NumericalError(std::string("training ") + to_string(stage) + ": loss became " + std::to_string(loss) +
                         " at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
  }
}

class CsvLog {
 public:
  explicit CsvLog(const fs::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw UsageError("cannot write " + path.string());
    out_ << "epoch,train_loss,val_loss,lr,seconds,usage\n";
  }
  void append(const EpochReport& r) {
    char line[256];
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.3f,%.6f\n", r.epoch, r.train_loss, r.val_loss,
                  r.learning_rate, r.seconds, r.usage);
    out_ << line;
    out_.flush();
  }

 private:
  std::ofstream out_;
};

using Clock = std::chrono::steady_clock;

TrainResult train_autoencoder(const Config& cfg, const RunConfig& run, const TrainHooks& hooks) {
  const AutoencoderConfig model_cfg = ae_config(cfg, run.stage);
  const auto entries = read_manifest(run.data_dir / "manifest.txt");
  const std::vector<std::string> kinds =
      run.stage == Stage::vq2d ? std::vector<std::string>{"pa", "lat"} : std::vector<std::string>{"ct"};
  const auto train = load_samples(run.data_dir, select(entries, Split::train), kinds, model_cfg);
  auto val = load_samples(run.data_dir, select(entries, Split::validation), kinds, model_cfg);
  if (train.empty()) throw DataError("no training samples in " + (run.data_dir / "manifest.txt").string());
  // Without a validation split, select on the training samples.
  const std::vector<Volume>& val_set = val.empty() ? train : val;

  Autoencoder model(model_cfg, run.seed);
  auto params = model.parameters();
  auto state = make_optimizer_state(params, hyper_of(run));

  const std::size_t steps_per_epoch = (train.size() + run.batch_size - 1) / run.batch_size;
  const Schedule schedule = make_schedule(run, steps_per_epoch);
  std::mt19937_64 rng(run.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  fs::create_directories(run.checkpoint_dir);
  TrainResult result;
  result.best_checkpoint = run.checkpoint_dir / (std::string(to_string(run.stage)) + ".ckpt");
  CsvLog log(run.checkpoint_dir / (std::string(to_string(run.stage)) + ".csv"));
  double best = std::numeric_limits<double>::infinity();
  std::uint64_t step = 0;
  const auto reset_epochs = static_cast<std::size_t>(run.dead_code_until * static_cast<double>(run.epochs));

  for (std::size_t epoch = 0; epoch < run.epochs; ++epoch) {
    const auto start = Clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    std::fill(model.codebook().usage().begin(), model.codebook().usage().end(), 0);
    double loss_sum = 0;
    Tensor last_latents;
    double lr = 0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      std::vector<const Volume*> batch;
      for (std::size_t i = b * run.batch_size; i < std::min(train.size(), (b + 1) * run.batch_size); ++i) {
        batch.push_back(&train[order[i]]);
      }
      Tensor x = volume_batch(batch, model_cfg);
      zero_grads(params);
      auto s = model.forward(x, true);
      const double loss = s.loss.item();
      require_finite(loss, run.stage, epoch, step);
      s.loss.backward();
      lr = schedule.at(step);
      state.hyper.learning_rate = lr;
      optimizer_step(params, state);
      result.lr_trace.push_back(lr);
      loss_sum += loss;
      last_latents = s.latent_rows.detach();
      ++step;
    }
    EpochReport report;
    report.epoch = epoch;
    report.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
    report.learning_rate = lr;
    report.usage = model.codebook().usage_fraction();
    if (epoch < reset_epochs && epoch + 1 < run.epochs) {
      reset_dead_codes(model.codebook(), last_latents, run.dead_code_min_usage, rng);
    }

    double val_loss = 0;
    {
      NoGradGuard no_grad;
      for (std::size_t i = 0; i < val_set.size(); i += run.batch_size) {
        std::vector<const Volume*> batch;
        for (std::size_t j = i; j < std::min(val_set.size(), i + run.batch_size); ++j) batch.push_back(&val_set[j]);
        val_loss += model.forward(volume_batch(batch, model_cfg), false).loss.item() * static_cast<double>(batch.size());
      }
      val_loss /= static_cast<double>(val_set.size());
    }
    if (hooks.validation_override) val_loss = hooks.validation_override(epoch, val_loss);
    require_finite(val_loss, run.stage, epoch, step);
    report.val_loss = val_loss;
    if (val_loss < best) {
      best = val_loss;
      result.best_epoch = epoch;
      save_checkpoint(model.to_checkpoint(to_string(run.stage), run.seed), result.best_checkpoint);
    }
    report.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    log.append(report);
    result.reports.push_back(report);
  }
  return result;
}

TrainResult train_translator(const Config& cfg, const RunConfig& run, const TrainHooks& hooks) {
  const fs::path vq2d = run.checkpoint_dir / "vq2d.ckpt", vq3d = run.checkpoint_dir / "vq3d.ckpt";
  for (const auto& p : {vq2d, vq3d}) {
    if (!fs::exists(p)) throw DependencyError("gpt stage needs the autoencoder checkpoint " + p.string());
  }
  TokenDataset tokens = tokenize_dataset(vq2d, vq3d, run.data_dir);
  write_token_dataset(tokens, run.checkpoint_dir / "tokens.txt");

  std::vector<TranslationSequence> train, val;
  for (const auto& r : tokens.records) {
    if (r.split == Split::train) train.push_back(r.sequence);
    if (r.split == Split::validation) val.push_back(r.sequence);
  }
  if (train.empty()) throw DataError("no training sequences for the gpt stage");
  const std::vector<TranslationSequence>& val_set = val.empty() ? train : val;

  TranslatorConfig defaults = TranslatorConfig::desk();
  defaults.context = tokens.layout.total();
  TranslatorConfig model_cfg = TranslatorConfig::from_config(cfg, "gpt", defaults);
  model_cfg.codebook_size = tokens.codebook_size;
  model_cfg.validate();
  Translator model(model_cfg, run.seed);
  auto params = model.parameters();
  auto state = make_optimizer_state(params, hyper_of(run));

  const std::size_t steps_per_epoch = (train.size() + run.batch_size - 1) / run.batch_size;
  const Schedule schedule = make_schedule(run, steps_per_epoch);
  std::mt19937_64 rng(run.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.best_checkpoint = run.checkpoint_dir / "gpt.ckpt";
  CsvLog log(run.checkpoint_dir / "gpt.csv");
  double best = std::numeric_limits<double>::infinity();
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < run.epochs; ++epoch) {
    const auto start = Clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0, lr = 0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      std::vector<TranslationSequence> batch;
      for (std::size_t i = b * run.batch_size; i < std::min(train.size(), (b + 1) * run.batch_size); ++i) {
        batch.push_back(train[order[i]]);
      }
      zero_grads(params);
      Tensor loss = model.loss(batch, true);
      require_finite(loss.item(), run.stage, epoch, step);
      loss.backward();
      lr = schedule.at(step);
      state.hyper.learning_rate = lr;
      optimizer_step(params, state);
      result.lr_trace.push_back(lr);
      loss_sum += loss.item();
      ++step;
    }
    EpochReport report;
    report.epoch = epoch;
    report.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
    report.learning_rate = lr;
    report.usage = 1.0;
    double val_loss = 0;
    {
      NoGradGuard no_grad;
      for (std::size_t i = 0; i < val_set.size(); i += run.batch_size) {
        const std::size_t n = std::min(val_set.size(), i + run.batch_size) - i;
        val_loss += model.loss(std::span(val_set).subspan(i, n), false).item() * static_cast<double>(n);
      }
      val_loss /= static_cast<double>(val_set.size());
    }
    if (hooks.validation_override) val_loss = hooks.validation_override(epoch, val_loss);
    require_finite(val_loss, run.stage, epoch, step);
    report.val_loss = val_loss;
    if (val_loss < best) {
      best = val_loss;
      result.best_epoch = epoch;
      save_checkpoint(model.to_checkpoint("gpt", run.seed), result.best_checkpoint);
    }
    report.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    log.append(report);
    result.reports.push_back(report);
  }
  return result;
}

Volume tensor_to_volume(std::span<const Real> values, Extents3 extents, Spacing3 spacing) {
  Volume v{extents, spacing, ValueKind::normalized, std::vector<double>(values.begin(), values.end())};
  return v;
}

}  // namespace

// ---- dataset ----

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t line_no = 0, offset = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    ManifestEntry e;
    std::string split;
    if (!(fields >> e.index >> e.seed >> split)) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": expected 'index seed split'", line_start);
    }
    e.split = parse_split(split);
    out.push_back(e);
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::string text = "# index seed split\n";
  for (const auto& e : entries) {
    text += std::to_string(e.index) + " " + std::to_string(e.seed) + " " + to_string(e.split) + "\n";
  }
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

fs::path sample_path(const fs::path& data_dir, const std::string& kind, std::uint64_t index) {
  return data_dir / (kind + "_" + padded(index) + ".rvol");
}

std::vector<ManifestEntry> select(const std::vector<ManifestEntry>& entries, Split split) {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out), [&](const auto& e) { return e.split == split; });
  return out;
}

Config default_config() {
  Config c = Config::parse(R"(
data.dir = data
phantom.count = 96
phantom.seed = 1
phantom.extents = 32,32,32
phantom.fov_mm = 320
split.fractions = 0.7,0.2,0.1
split.seed = 1
preprocess.target_spacing_mm = 10
preprocess.crop = 32,32,32
preprocess.output = 32,32,32
preprocess.hu_min = -1000
preprocess.hu_max = 1000
drr.mu_water = 0.02
drr.l_max = 12
train.seed = 0
train.checkpoint_dir = checkpoints
train.vq2d.batch_size = 8
train.vq2d.epochs = 30
train.vq2d.learning_rate = 0.002
train.vq3d.batch_size = 2
train.vq3d.epochs = 30
train.vq3d.learning_rate = 0.002
train.gpt.batch_size = 8
train.gpt.epochs = 30
train.gpt.learning_rate = 0.003
sample.strategy = top_k
sample.temperature = 1
sample.top_k = 100
sample.seed = 0
)");
  c.merge(AutoencoderConfig::desk_2d().to_config("vq2d"));
  c.merge(AutoencoderConfig::desk_3d().to_config("vq3d"));
  Config gpt = TranslatorConfig::desk().to_config("gpt");
  for (const auto& [k, v] : gpt.entries()) {
    if (k != "gpt.codebook_size" && k != "gpt.context") c.set(k, v);
  }
  return c;
}

PhantomSpec phantom_spec_from_config(const Config& cfg) {
  PhantomSpec spec;
  spec.seed = static_cast<std::uint64_t>(cfg.get_int("phantom.seed", static_cast<std::int64_t>(spec.seed)));
  spec.extents = extents_from(cfg.get_size_list("phantom.extents", {32, 32, 32}), "phantom.extents");
  spec.field_of_view_mm = cfg.get_double("phantom.fov_mm", spec.field_of_view_mm);
  spec.shift_jitter = cfg.get_double("phantom.shift_jitter", spec.shift_jitter);
  spec.structure_jitter = cfg.get_double("phantom.structure_jitter", spec.structure_jitter);
  spec.radius_jitter = cfg.get_double("phantom.radius_jitter", spec.radius_jitter);
  validate(spec);
  return spec;
}

PreprocessConfig preprocess_config_from_config(const Config& cfg) {
  PreprocessConfig p;
  p.target_spacing_mm = cfg.get_double("preprocess.target_spacing_mm", 10.0);
  p.crop_extents = extents_from(cfg.get_size_list("preprocess.crop", {32, 32, 32}), "preprocess.crop");
  p.output_extents = extents_from(cfg.get_size_list("preprocess.output", {32, 32, 32}), "preprocess.output");
  p.hu_min = cfg.get_double("preprocess.hu_min", p.hu_min);
  p.hu_max = cfg.get_double("preprocess.hu_max", p.hu_max);
  return p;
}

std::vector<ManifestEntry> generate_dataset(const Config& cfg, const fs::path& data_dir) {
  const PhantomSpec spec = phantom_spec_from_config(cfg);
  const std::size_t count = cfg.get_size("phantom.count", 96);
  const auto fr = cfg.get_double_list("split.fractions", {0.7, 0.2, 0.1});
  if (fr.size() != 3) throw UsageError("config: 'split.fractions' expects train,validation,test");
  const auto split_seed = static_cast<std::uint64_t>(cfg.get_int("split.seed", 1));
  std::vector<ManifestEntry> entries;
  if (count == 0) {
    write_manifest(data_dir / "manifest.txt", entries);
    return entries;
  }
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < count; ++i) ids.push_back(padded(i));
  const SplitAssignment split = split_patients(ids, {fr[0], fr[1], fr[2]}, split_seed);
  fs::create_directories(data_dir);
  for (std::size_t i = 0; i < count; ++i) {
    write_rvol(generate_phantom(spec, i), sample_path(data_dir, "hu", i));
    entries.push_back({i, spec.seed, split.label.at(padded(i))});
  }
  write_manifest(data_dir / "manifest.txt", entries);
  return entries;
}

void preprocess_dataset(const Config& cfg, const fs::path& data_dir) {
  const PreprocessConfig p = preprocess_config_from_config(cfg);
  for (const auto& e : read_manifest(data_dir / "manifest.txt")) {
    write_rvol(preprocess_volume(read_rvol(sample_path(data_dir, "hu", e.index)), p), sample_path(data_dir, "ct", e.index));
  }
}

void project_dataset(const Config& cfg, const fs::path& data_dir) {
  const double mu = cfg.get_double("drr.mu_water", kMuWater);
  const double l_max = cfg.get_double("drr.l_max", kDefaultLmax);
  const double hu_min = cfg.get_double("preprocess.hu_min", -1000.0), hu_max = cfg.get_double("preprocess.hu_max", 1000.0);
  for (const auto& e : read_manifest(data_dir / "manifest.txt")) {
    Volume ct = read_rvol(sample_path(data_dir, "ct", e.index));
    if (ct.kind == ValueKind::normalized) ct = denormalize(ct, hu_min, hu_max);
    write_rvol(radiograph_to_volume(simulate_radiograph(ct, View::pa, mu, l_max)), sample_path(data_dir, "pa", e.index));
    write_rvol(radiograph_to_volume(simulate_radiograph(ct, View::lateral, mu, l_max)),
               sample_path(data_dir, "lat", e.index));
  }
}

Tensor volume_batch(const std::vector<const Volume*>& volumes, const AutoencoderConfig& cfg) {
  std::vector<Real> values;
  for (const Volume* v : volumes) {
    if (v->extents != cfg.input) throw DataError("volume extents do not match the autoencoder input");
    values.insert(values.end(), v->voxels.begin(), v->voxels.end());
  }
  Shape shape{volumes.size(), 1};
  if (cfg.rank == 3) shape.push_back(cfg.input.depth);
  shape.push_back(cfg.input.height);
  shape.push_back(cfg.input.width);
  return Tensor::from(std::move(shape), std::move(values));
}

// ---- training ----

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::vq2d: return "vq2d";
    case Stage::vq3d: return "vq3d";
    case Stage::gpt: return "gpt";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  if (name == "vq2d") return Stage::vq2d;
  if (name == "vq3d") return Stage::vq3d;
  if (name == "gpt") return Stage::gpt;
  throw UsageError("unknown training stage '" + name + "' (expected vq2d, vq3d or gpt)");
}

RunConfig RunConfig::from_config(const Config& cfg, Stage stage) {
  RunConfig r;
  const std::string p = std::string("train.") + to_string(stage) + ".";
  r.stage = stage;
  r.batch_size = cfg.get_size(p + "batch_size", stage == Stage::vq3d ? 2 : 8);
  r.epochs = cfg.get_size(p + "epochs", 30);
  r.learning_rate = cfg.get_double(p + "learning_rate", 2e-3);
  r.optimizer = parse_optimizer_kind(cfg.get_string(p + "optimizer", "adam"));
  r.weight_decay = cfg.get_double(p + "weight_decay", 0.0);
  r.beta1 = cfg.get_double(p + "beta1", r.beta1);
  r.beta2 = cfg.get_double(p + "beta2", r.beta2);
  r.eps = cfg.get_double(p + "eps", r.eps);
  const std::string schedule = cfg.get_string(p + "schedule", "cosine");
  if (schedule != "cosine" && schedule != "constant") {
    throw UsageError("config: '" + p + "schedule' must be cosine or constant");
  }
  r.cosine = schedule == "cosine";
  r.warmup_fraction = cfg.get_double(p + "warmup_fraction", 0.05);
  r.dead_code_min_usage = cfg.get_size(p + "dead_code_min_usage", 1);
  r.dead_code_until = cfg.get_double(p + "dead_code_until", 0.5);
  r.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 0));
  r.data_dir = data_dir_of(cfg);
  r.checkpoint_dir = cfg.get_string("train.checkpoint_dir", "checkpoints");
  if (r.batch_size == 0) throw UsageError("config: '" + p + "batch_size' must be at least 1");
  if (r.epochs == 0) throw UsageError("config: '" + p + "epochs' must be at least 1");
  if (!(r.learning_rate >= 0)) throw UsageError("config: '" + p + "learning_rate' must be non-negative");
  if (!(r.beta1 >= 0 && r.beta1 < 1 && r.beta2 >= 0 && r.beta2 < 1 && r.eps > 0)) {
    throw UsageError("config: '" + p + "beta1/beta2' must lie in [0, 1) and '" + p + "eps' must be positive");
  }
  if (!(r.warmup_fraction >= 0 && r.warmup_fraction < 1)) {
    throw UsageError("config: '" + p + "warmup_fraction' must lie in [0, 1)");
  }
  return r;
}

TrainResult train_stage(const Config& cfg, Stage stage, const TrainHooks& hooks) {
  const RunConfig run = RunConfig::from_config(cfg, stage);
  return stage == Stage::gpt ? train_translator(cfg, run, hooks) : train_autoencoder(cfg, run, hooks);
}

// ---- tokens ----

TokenDataset tokenize_dataset(const fs::path& vq2d_checkpoint, const fs::path& vq3d_checkpoint,
                              const fs::path& data_dir) {
  const Autoencoder ae2 = Autoencoder::from_checkpoint(load_checkpoint(vq2d_checkpoint));
  const Autoencoder ae3 = Autoencoder::from_checkpoint(load_checkpoint(vq3d_checkpoint));
  if (ae2.config().rank != 2 || ae3.config().rank != 3) {
    throw DataError("tokenize: expected a rank-2 radiograph and a rank-3 CT autoencoder checkpoint");
  }
  if (ae2.config().codebook_size != ae3.config().codebook_size) {
    throw DataError("tokenize: radiograph and CT codebooks differ in size (" +
                    std::to_string(ae2.config().codebook_size) + " vs " + std::to_string(ae3.config().codebook_size) +
                    ")");
  }
  TokenDataset ds;
  ds.codebook_size = ae3.config().codebook_size;
  const Extents3 l2 = ae2.config().latent_extents(), l3 = ae3.config().latent_extents();
  ds.layout = {l2.count(), l2.count(), l3.count()};
  for (const auto& e : read_manifest(data_dir / "manifest.txt")) {
    auto load = [&](const std::string& kind, const AutoencoderConfig& cfg) {
      const auto path = sample_path(data_dir, kind, e.index);
      Volume v = read_rvol(path);
      check_extents(v, cfg, path);
      return v;
    };
    const Volume pa = load("pa", ae2.config()), lat = load("lat", ae2.config()), ct = load("ct", ae3.config());
    const auto g2 = ae2.tokenize(volume_batch({&pa, &lat}, ae2.config()));
    const auto g3 = ae3.tokenize(volume_batch({&ct}, ae3.config()));
    ds.records.push_back({e.index, e.split, build_sequence(g2[0], g2[1], g3[0], ds.codebook_size)});
  }
  return ds;
}

std::string encode_token_dataset(const TokenDataset& ds) {
  std::ostringstream out;
  out << "rad2ct-tokens 1\n";
  out << "layout " << ds.layout.pa << " " << ds.layout.lat << " " << ds.layout.ct << " codebook " << ds.codebook_size
      << "\n";
  for (const auto& r : ds.records) {
    out << r.index << " " << to_string(r.split) << " " << format_tokens(r.sequence.tokens) << "\n";
  }
  return out.str();
}

TokenDataset decode_token_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  TokenDataset ds;
  if (!std::getline(in, line) || line != "rad2ct-tokens 1") throw ParseError("token dataset: bad header", 0);
  std::size_t at = line.size() + 1;
  if (!std::getline(in, line)) throw ParseError("token dataset: missing layout line", at);
  {
    std::istringstream f(line);
    std::string kw, cb;
    if (!(f >> kw >> ds.layout.pa >> ds.layout.lat >> ds.layout.ct >> cb >> ds.codebook_size) || kw != "layout" ||
        cb != "codebook") {
      throw ParseError("token dataset: malformed layout line", at);
    }
  }
  at += line.size() + 1;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      std::istringstream f(line);
      TokenRecord r;
      std::string split;
      if (!(f >> r.index >> split)) throw ParseError("token dataset: malformed record", at);
      r.split = parse_split(split);
      std::string rest;
      std::getline(f, rest);
      r.sequence.tokens = parse_tokens(rest);
      r.sequence.layout = ds.layout;
      r.sequence.codebook_size = ds.codebook_size;
      if (r.sequence.tokens.size() != ds.layout.total()) {
        throw ParseError("token dataset: record has " + std::to_string(r.sequence.tokens.size()) +
                             " tokens, layout needs " + std::to_string(ds.layout.total()),
                         at);
      }
      ds.records.push_back(std::move(r));
    }
    at += line.size() + 1;
  }
  return ds;
}

void write_token_dataset(const TokenDataset& ds, const fs::path& path) {
  const std::string text = encode_token_dataset(ds);
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

TokenDataset read_token_dataset(const fs::path& path) {
  const auto bytes = read_file(path);
  return decode_token_dataset(std::string(bytes.begin(), bytes.end()));
}

// ---- evaluation and inference ----

double dice(const Volume& a, const Volume& b) {
  if (a.extents != b.extents) throw DimensionError("dice: extents differ");
  std::size_t inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.voxels.size(); ++i) {
    const bool x = a.voxels[i] != 0.0, y = b.voxels[i] != 0.0;
    inter += x && y;
    sa += x;
    sb += y;
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

ReconstructionMetrics evaluate_reconstruction(const Volume& truth, const Volume& prediction, double threshold_hu) {
  if (truth.extents != prediction.extents || truth.voxels.size() != prediction.voxels.size()) {
    throw DimensionError("evaluate_reconstruction: truth and prediction extents differ");
  }
  if (truth.voxels.empty()) throw DimensionError("evaluate_reconstruction: empty volumes");
  double abs_sum = 0, sq_sum = 0;
  for (std::size_t i = 0; i < truth.voxels.size(); ++i) {
    const double d = truth.voxels[i] - prediction.voxels[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  const double n = static_cast<double>(truth.voxels.size());
  ReconstructionMetrics m;
  m.mae = abs_sum / n;
  m.psnr = 10.0 * std::log10(4.0 / std::max(sq_sum / n, 1e-10));
  m.dice = dice(outline_mask(truth, threshold_hu), outline_mask(prediction, threshold_hu));
  return m;
}

Pipeline Pipeline::load(const fs::path& vq2d_checkpoint, const fs::path& vq3d_checkpoint,
                        const fs::path& gpt_checkpoint) {
  Pipeline p{Autoencoder::from_checkpoint(load_checkpoint(vq2d_checkpoint)),
             Autoencoder::from_checkpoint(load_checkpoint(vq3d_checkpoint)),
             Translator::from_checkpoint(load_checkpoint(gpt_checkpoint))};
  if (p.radiograph.config().rank != 2 || p.ct.config().rank != 3) {
    throw DataError("pipeline: checkpoints are not a rank-2 and a rank-3 autoencoder");
  }
  if (p.translator.config().codebook_size != p.ct.config().codebook_size ||
      p.radiograph.config().codebook_size != p.ct.config().codebook_size) {
    throw DataError("pipeline: codebook sizes of the checkpoints disagree");
  }
  if (p.translator.config().context < p.layout().total()) {
    throw DataError("pipeline: translator context is shorter than the token sequence");
  }
  return p;
}

SequenceLayout Pipeline::layout() const {
  const Extents3 l2 = radiograph.config().latent_extents(), l3 = ct.config().latent_extents();
  return {l2.count(), l2.count(), l3.count()};
}

Reconstruction reconstruct(const Pipeline& p, const Volume& pa, const Volume* lateral, const SamplingConfig& sampling,
                           Spacing3 spacing) {
  const auto& c2 = p.radiograph.config();
  std::vector<const Volume*> views{&pa};
  if (lateral) views.push_back(lateral);
  for (const Volume* v : views) {
    if (v->extents != c2.input || v->kind != ValueKind::normalized) {
      throw DataError("reconstruct: radiographs must be normalized " + std::to_string(c2.input.height) + "x" +
                      std::to_string(c2.input.width) + " images");
    }
  }
  const auto grids = p.radiograph.tokenize(volume_batch(views, c2));
  const SequenceLayout layout = p.layout();
  const std::size_t n = p.ct.config().codebook_size;
  std::vector<TokenId> prompt{static_cast<TokenId>(2 * n)};
  for (const auto& g : grids) {
    const auto flat = flatten_tokens(g);
    prompt.insert(prompt.end(), flat.begin(), flat.end());
  }
  const auto generated = p.translator.generate(prompt, layout, layout.total() - prompt.size(), sampling);
  Reconstruction r;
  r.sequence = prompt;
  r.sequence.insert(r.sequence.end(), generated.begin(), generated.end());
  const Extents3 l3 = p.ct.config().latent_extents();
  r.ct_tokens = ct_grid(r.sequence, layout, n, l3.height, l3.width, l3.depth);
  Tensor decoded = p.ct.decode_tokens(std::span(&r.ct_tokens, 1));
  r.volume = tensor_to_volume(decoded.values(), p.ct.config().input, spacing);
  return r;
}

}  // namespace rad2ct
