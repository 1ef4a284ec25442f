#pragma once

// Dataset layout, training loops for the three stages, token datasets, metrics and
// the radiograph-to-CT reconstruction chain.
//
// A data directory holds `manifest.txt` (one `index seed split` line per sample)
// and per-sample RVOL files: hu_<index>.rvol (raw phantom), ct_<index>.rvol
// (preprocessed, normalized), pa_<index>.rvol and lat_<index>.rvol (log-normalized
// radiographs stored as depth-1 volumes).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rad2ct/autoencoder.hpp"
#include "rad2ct/config.hpp"
#include "rad2ct/drr.hpp"
#include "rad2ct/optim.hpp"
#include "rad2ct/phantom.hpp"
#include "rad2ct/preprocess.hpp"
#include "rad2ct/translator.hpp"

namespace rad2ct {

namespace fs = std::filesystem;

// ---- dataset ----

struct ManifestEntry {
  std::uint64_t index = 0;
  std::uint64_t seed = 0;
  Split split = Split::train;
  bool operator==(const ManifestEntry&) const = default;
};

std::vector<ManifestEntry> read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries);
fs::path sample_path(const fs::path& data_dir, const std::string& kind, std::uint64_t index);
std::vector<ManifestEntry> select(const std::vector<ManifestEntry>& entries, Split split);

/// Desk-scale defaults for every key the pipeline reads.
Config default_config();

PhantomSpec phantom_spec_from_config(const Config& cfg);
PreprocessConfig preprocess_config_from_config(const Config& cfg);

/// Writes hu_ volumes and the manifest (splits by split_patients over the sample ids).
std::vector<ManifestEntry> generate_dataset(const Config& cfg, const fs::path& data_dir);
/// hu_ -> ct_ for every manifest entry.
void preprocess_dataset(const Config& cfg, const fs::path& data_dir);
/// ct_ -> pa_ and lat_ for every manifest entry.
void project_dataset(const Config& cfg, const fs::path& data_dir);

/// Stacks normalized volumes into a [B, 1, ...] batch for an autoencoder.
Tensor volume_batch(const std::vector<const Volume*>& volumes, const AutoencoderConfig& cfg);

// ---- training ----

enum class Stage { vq2d, vq3d, gpt };
const char* to_string(Stage stage);
Stage parse_stage(const std::string& name);

struct RunConfig {
  Stage stage = Stage::vq3d;
  std::size_t batch_size = 1;
  std::size_t epochs = 1;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool cosine = true;
  double warmup_fraction = 0.05;
  std::uint64_t seed = 0;
  std::uint64_t dead_code_min_usage = 1;
  double dead_code_until = 0.5;  // fraction of epochs during which dead entries are re-seeded
  fs::path data_dir;
  fs::path checkpoint_dir;

  /// Keys `train.<stage>.*`, `train.seed`, `data.dir`, `train.checkpoint_dir`.
  static RunConfig from_config(const Config& cfg, Stage stage);
};

struct EpochReport {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;
  double seconds = 0.0;
  double usage = 0.0;
};

struct TrainResult {
  fs::path best_checkpoint;
  std::size_t best_epoch = 0;
  std::vector<EpochReport> reports;
  std::vector<double> lr_trace;  // learning rate used at every optimizer step
};

struct TrainHooks {
  /// Replaces the measured validation loss (used to inject synthetic curves).
  std::function<double(std::size_t epoch, double measured)> validation_override;
};

/// Trains one stage and keeps `<checkpoint_dir>/<stage>.ckpt` at the epoch with the
/// lowest validation loss. Appends EpochReports to `<stage>.csv`. The gpt stage
/// needs vq2d.ckpt and vq3d.ckpt (DependencyError otherwise) and writes tokens.txt.
TrainResult train_stage(const Config& cfg, Stage stage, const TrainHooks& hooks = {});

// ---- tokens ----

struct TokenRecord {
  std::uint64_t index = 0;
  Split split = Split::train;
  TranslationSequence sequence;
};

struct TokenDataset {
  SequenceLayout layout;
  std::size_t codebook_size = 0;
  std::vector<TokenRecord> records;
};

/// Tokenizes every manifest sample with the frozen autoencoders. Throws DataError
/// when a sample's extents differ from the checkpoint config.
TokenDataset tokenize_dataset(const fs::path& vq2d_checkpoint, const fs::path& vq3d_checkpoint,
                              const fs::path& data_dir);
std::string encode_token_dataset(const TokenDataset& ds);
TokenDataset decode_token_dataset(const std::string& text);
void write_token_dataset(const TokenDataset& ds, const fs::path& path);
TokenDataset read_token_dataset(const fs::path& path);

// ---- evaluation and inference ----

struct ReconstructionMetrics {
  double mae = 0.0;
  double psnr = 0.0;
  double dice = 0.0;
};

/// MAE and PSNR on normalized values (peak-to-peak 2), Dice of the outline masks.
/// Identical volumes give PSNR from an MSE floor of 1e-10.
ReconstructionMetrics evaluate_reconstruction(const Volume& truth, const Volume& prediction,
                                              double threshold_hu = -500.0);
double dice(const Volume& a, const Volume& b);

struct Pipeline {
  Autoencoder radiograph;
  Autoencoder ct;
  Translator translator;

  static Pipeline load(const fs::path& vq2d_checkpoint, const fs::path& vq3d_checkpoint,
                       const fs::path& gpt_checkpoint);
  SequenceLayout layout() const;
};

struct Reconstruction {
  Volume volume;                  // normalized CT
  std::vector<TokenId> sequence;  // full SOS|PA|LAT|CT sequence
  TokenGrid ct_tokens;
};

/// Encodes the radiographs, generates the missing spans and decodes the CT tokens.
/// Without `lateral` the lateral span is generated too.
Reconstruction reconstruct(const Pipeline& p, const Volume& pa, const Volume* lateral, const SamplingConfig& sampling,
                           Spacing3 spacing = {10.0, 10.0, 10.0});

}  // namespace rad2ct
