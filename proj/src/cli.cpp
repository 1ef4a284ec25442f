#include "rad2ct/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <ostream>
#include <sstream>

#include "rad2ct/error.hpp"
#include "rad2ct/image.hpp"
#include "rad2ct/rvol.hpp"
#include "rad2ct/training.hpp"

namespace rad2ct {

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;

  Config load() const {
    Config cfg = default_config();
    if (!config_path.empty()) cfg.merge(Config::load(config_path));
    for (const auto& o : overrides) cfg.apply_override(o);
    return cfg;
  }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config_path, "key = value configuration file (defaults are built in)");
  sub->add_option("-s,--set", c.overrides, "override one key, e.g. --set train.vq3d.epochs=10")->take_all();
}

struct Views {
  bool lateral = true;
};

Views parse_views(const std::string& text) {
  if (text == "pa") return {false};
  if (text == "pa,lat" || text == "pa,lateral") return {true};
  throw UsageError("--views must be 'pa' or 'pa,lat', got '" + text + "'");
}

SamplingConfig sampling_from(const Config& cfg, const std::string& strategy_flag) {
  SamplingConfig s;
  s.strategy = parse_sampling(strategy_flag.empty() ? cfg.get_string("sample.strategy", "top_k") : strategy_flag);
  s.temperature = cfg.get_double("sample.temperature", 1.0);
  s.top_k = cfg.get_size("sample.top_k", 100);
  s.seed = static_cast<std::uint64_t>(cfg.get_int("sample.seed", 0));
  return s;
}

struct CheckpointPaths {
  std::string vq2d, vq3d, gpt;

  void fill(const Config& cfg) {
    const fs::path dir = cfg.get_string("train.checkpoint_dir", "checkpoints");
    if (vq2d.empty()) vq2d = (dir / "vq2d.ckpt").string();
    if (vq3d.empty()) vq3d = (dir / "vq3d.ckpt").string();
    if (gpt.empty()) gpt = (dir / "gpt.ckpt").string();
    for (const auto& p : {vq2d, vq3d, gpt}) {
      if (!fs::exists(p)) throw DependencyError("missing checkpoint " + p);
    }
  }
};

void add_checkpoint_flags(CLI::App* sub, CheckpointPaths& p) {
  sub->add_option("--vq2d", p.vq2d, "radiograph autoencoder checkpoint (default <checkpoint_dir>/vq2d.ckpt)");
  sub->add_option("--vq3d", p.vq3d, "CT autoencoder checkpoint (default <checkpoint_dir>/vq3d.ckpt)");
  sub->add_option("--gpt", p.gpt, "translator checkpoint (default <checkpoint_dir>/gpt.ckpt)");
}

Volume read_radiograph(const std::string& path) {
  Volume v = read_rvol(path);
  if (v.extents.depth != 1) throw DataError(path + " is not a radiograph (depth " + std::to_string(v.extents.depth) + ")");
  return v;
}

std::string metrics_line(const ReconstructionMetrics& m) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "mae %.6f psnr %.3f dice %.6f", m.mae, m.psnr, m.dice);
  return buf;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Synthetic CT from chest radiographs: phantoms, DRRs, VQ autoencoders and a token translator", "rad2ct"};
  app.require_subcommand(1);
  Common common;

  // phantom gen
  auto* phantom = app.add_subcommand("phantom", "synthetic thorax phantoms");
  phantom->require_subcommand(1);
  auto* phantom_gen = phantom->add_subcommand("gen", "write hu_ volumes and manifest.txt into data.dir");
  add_common(phantom_gen, common);

  auto* preprocess = app.add_subcommand("preprocess", "resample, crop and normalize hu_ volumes into ct_ volumes");
  add_common(preprocess, common);

  // drr project
  auto* drr = app.add_subcommand("drr", "digitally reconstructed radiographs");
  drr->require_subcommand(1);
  auto* drr_project = drr->add_subcommand("project", "project every ct_ volume to pa_ and lat_, or one --input file");
  add_common(drr_project, common);
  std::string drr_input, drr_output, drr_view = "pa", drr_pgm;
  drr_project->add_option("--input", drr_input, "single volume to project instead of the dataset");
  drr_project->add_option("--output", drr_output, "RVOL output for --input");
  drr_project->add_option("--view", drr_view, "pa or lateral (with --input)");
  drr_project->add_option("--pgm", drr_pgm, "also write a 16-bit PGM (with --input)");

  // train
  auto* train = app.add_subcommand("train", "train one stage, keeping the best-validation checkpoint");
  add_common(train, common);
  std::string stage_name;
  train->add_option("stage", stage_name, "vq2d, vq3d or gpt")->required()->check(CLI::IsMember({"vq2d", "vq3d", "gpt"}));

  // tokenize
  auto* tokenize = app.add_subcommand("tokenize", "encode the dataset into token sequences");
  add_common(tokenize, common);
  CheckpointPaths tok_ckpt;
  tokenize->add_option("--vq2d", tok_ckpt.vq2d, "radiograph autoencoder checkpoint");
  tokenize->add_option("--vq3d", tok_ckpt.vq3d, "CT autoencoder checkpoint");
  std::string tokens_out;
  tokenize->add_option("-o,--output", tokens_out, "token file (default <checkpoint_dir>/tokens.txt)");

  // reconstruct
  auto* recon = app.add_subcommand("reconstruct", "radiograph(s) to CT volume");
  add_common(recon, common);
  CheckpointPaths recon_ckpt;
  add_checkpoint_flags(recon, recon_ckpt);
  std::string views = "pa,lat", pa_path, lat_path, recon_out, recon_tokens, recon_png, recon_sampling;
  recon->add_option("--views", views, "pa or pa,lat");
  recon->add_option("--pa", pa_path, "PA radiograph (RVOL, depth 1)")->required();
  recon->add_option("--lat", lat_path, "lateral radiograph (RVOL, depth 1), needed for --views pa,lat");
  recon->add_option("-o,--output", recon_out, "output CT volume (RVOL)")->required();
  recon->add_option("--tokens", recon_tokens, "also write the full token sequence");
  recon->add_option("--png", recon_png, "also write the middle axial slice as PNG");
  recon->add_option("--sampling", recon_sampling, "greedy or top_k (default sample.strategy)");

  // eval
  auto* eval = app.add_subcommand("eval", "MAE, PSNR and outline Dice");
  add_common(eval, common);
  CheckpointPaths eval_ckpt;
  add_checkpoint_flags(eval, eval_ckpt);
  std::string truth_path, pred_path, eval_split = "test", eval_views = "pa,lat", eval_sampling;
  double threshold = -500.0;
  eval->add_option("--truth", truth_path, "ground-truth volume; compare with --pred instead of running the models");
  eval->add_option("--pred", pred_path, "predicted volume");
  eval->add_option("--split", eval_split, "dataset split to reconstruct and score")
      ->check(CLI::IsMember({"train", "validation", "test"}));
  eval->add_option("--views", eval_views, "pa or pa,lat");
  eval->add_option("--threshold", threshold, "outline threshold in HU");
  eval->add_option("--sampling", eval_sampling, "greedy or top_k (default sample.strategy)");

  // export
  auto* exp = app.add_subcommand("export", "images for inspection");
  exp->require_subcommand(1);
  auto* exp_png = exp->add_subcommand("png", "8-bit PNG slice of a normalized volume");
  std::string exp_in, exp_out;
  int axis = 0;
  std::size_t index = 0;
  exp_png->add_option("--input", exp_in)->required();
  exp_png->add_option("--output", exp_out)->required();
  exp_png->add_option("--axis", axis, "0 depth, 1 height, 2 width")->check(CLI::Range(0, 2));
  exp_png->add_option("--index", index, "slice index");
  auto* exp_pgm = exp->add_subcommand("pgm", "16-bit PGM of a radiograph volume");
  std::string pgm_view = "pa";
  exp_pgm->add_option("--input", exp_in)->required();
  exp_pgm->add_option("--output", exp_out)->required();
  exp_pgm->add_option("--view", pgm_view, "pa or lateral");
  double pgm_l_max = kDefaultLmax;
  exp_pgm->add_option("--l-max", pgm_l_max, "log-normalization bound the radiograph was made with");

  auto* config = app.add_subcommand("config", "print the effective configuration");
  add_common(config, common);

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (phantom_gen->parsed()) {
      const Config cfg = common.load();
      const fs::path data = cfg.get_string("data.dir", "data");
      const auto entries = generate_dataset(cfg, data);
      out << "wrote " << entries.size() << " phantoms to " << data.string() << "\n";
    } else if (preprocess->parsed()) {
      const Config cfg = common.load();
      preprocess_dataset(cfg, cfg.get_string("data.dir", "data"));
      out << "preprocessed " << cfg.get_string("data.dir", "data") << "\n";
    } else if (drr_project->parsed()) {
      const Config cfg = common.load();
      const double mu = cfg.get_double("drr.mu_water", kMuWater), l_max = cfg.get_double("drr.l_max", kDefaultLmax);
      if (drr_input.empty()) {
        project_dataset(cfg, cfg.get_string("data.dir", "data"));
        out << "projected " << cfg.get_string("data.dir", "data") << "\n";
      } else {
        if (drr_output.empty() && drr_pgm.empty()) throw UsageError("--input needs --output or --pgm");
        const Volume v = read_rvol(drr_input);
        const Volume hu = v.kind == ValueKind::normalized ? denormalize(v, cfg.get_double("preprocess.hu_min", -1000.0),
                                                                        cfg.get_double("preprocess.hu_max", 1000.0))
                                                          : v;
        const Radiograph r = simulate_radiograph(hu, parse_view(drr_view), mu, l_max);
        if (!drr_output.empty()) write_rvol(radiograph_to_volume(r), drr_output);
        if (!drr_pgm.empty()) export_radiograph_pgm(r, drr_pgm);
      }
    } else if (train->parsed()) {
      const Config cfg = common.load();
      const auto result = train_stage(cfg, parse_stage(stage_name));
      for (const auto& r : result.reports) {
        char line[160];
        std::snprintf(line, sizeof line, "epoch %zu train %.6f val %.6f lr %.3g usage %.3f %.1fs\n", r.epoch,
                      r.train_loss, r.val_loss, r.learning_rate, r.usage, r.seconds);
        out << line;
      }
      out << "best epoch " << result.best_epoch << " -> " << result.best_checkpoint.string() << "\n";
    } else if (tokenize->parsed()) {
      const Config cfg = common.load();
      const fs::path dir = cfg.get_string("train.checkpoint_dir", "checkpoints");
      if (tok_ckpt.vq2d.empty()) tok_ckpt.vq2d = (dir / "vq2d.ckpt").string();
      if (tok_ckpt.vq3d.empty()) tok_ckpt.vq3d = (dir / "vq3d.ckpt").string();
      for (const auto& p : {tok_ckpt.vq2d, tok_ckpt.vq3d}) {
        if (!fs::exists(p)) throw DependencyError("missing checkpoint " + p);
      }
      const auto ds = tokenize_dataset(tok_ckpt.vq2d, tok_ckpt.vq3d, cfg.get_string("data.dir", "data"));
      const fs::path path = tokens_out.empty() ? dir / "tokens.txt" : fs::path(tokens_out);
      write_token_dataset(ds, path);
      out << "wrote " << ds.records.size() << " sequences of " << ds.layout.total() << " tokens to " << path.string()
          << "\n";
    } else if (recon->parsed()) {
      const Config cfg = common.load();
      const Views v = parse_views(views);
      if (v.lateral && lat_path.empty()) throw UsageError("--views pa,lat needs --lat");
      recon_ckpt.fill(cfg);
      const Pipeline p = Pipeline::load(recon_ckpt.vq2d, recon_ckpt.vq3d, recon_ckpt.gpt);
      const Volume pa = read_radiograph(pa_path);
      Volume lat;
      if (v.lateral) lat = read_radiograph(lat_path);
      const double spacing = cfg.get_double("preprocess.target_spacing_mm", 10.0);
      const auto r = reconstruct(p, pa, v.lateral ? &lat : nullptr, sampling_from(cfg, recon_sampling),
                                 {spacing, spacing, spacing});
      write_rvol(r.volume, recon_out);
      if (!recon_tokens.empty()) {
        const std::string text = format_tokens(r.sequence) + "\n";
        write_file(recon_tokens, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
      }
      if (!recon_png.empty()) export_slice_png(r.volume, 0, r.volume.extents.depth / 2, recon_png);
      out << "wrote " << recon_out << " (" << r.volume.extents.depth << "x" << r.volume.extents.height << "x"
          << r.volume.extents.width << ")\n";
    } else if (eval->parsed()) {
      const Config cfg = common.load();
      if (!truth_path.empty() || !pred_path.empty()) {
        if (truth_path.empty() || pred_path.empty()) throw UsageError("--truth and --pred go together");
        out << metrics_line(evaluate_reconstruction(read_rvol(truth_path), read_rvol(pred_path), threshold)) << "\n";
      } else {
        const Views v = parse_views(eval_views);
        eval_ckpt.fill(cfg);
        const Pipeline p = Pipeline::load(eval_ckpt.vq2d, eval_ckpt.vq3d, eval_ckpt.gpt);
        const fs::path data = cfg.get_string("data.dir", "data");
        const auto entries = select(read_manifest(data / "manifest.txt"), parse_split(eval_split));
        if (entries.empty()) throw DataError("split '" + eval_split + "' is empty");
        const SamplingConfig sampling = sampling_from(cfg, eval_sampling);
        ReconstructionMetrics mean;
        for (const auto& e : entries) {
          const Volume pa = read_radiograph(sample_path(data, "pa", e.index).string());
          const Volume lat = read_radiograph(sample_path(data, "lat", e.index).string());
          const auto r = reconstruct(p, pa, v.lateral ? &lat : nullptr, sampling);
          const auto m = evaluate_reconstruction(read_rvol(sample_path(data, "ct", e.index)), r.volume, threshold);
          out << "sample " << e.index << " " << metrics_line(m) << "\n";
          mean.mae += m.mae;
          mean.psnr += m.psnr;
          mean.dice += m.dice;
        }
        const double n = static_cast<double>(entries.size());
        mean.mae /= n;
        mean.psnr /= n;
        mean.dice /= n;
        out << "mean " << metrics_line(mean) << "\n";
      }
    } else if (exp_png->parsed()) {
      export_slice_png(read_rvol(exp_in), axis, index, exp_out);
    } else if (exp_pgm->parsed()) {
      export_radiograph_pgm(radiograph_from_volume(read_radiograph(exp_in), parse_view(pgm_view), pgm_l_max), exp_out);
    } else if (config->parsed()) {
      out << common.load().canonical_text();
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace rad2ct
