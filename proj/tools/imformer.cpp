// imformer command-line driver.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "imformer/io.hpp"
#include "imformer/pipeline.hpp"
#include "imformer/probes.hpp"

using namespace imformer;
using nlohmann::json;

namespace {

using Scalar = float;

bool ends_with(std::string const &s, std::string const &suffix)
{
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void write_text(std::string const &path, std::string const &text)
{
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) { throw std::runtime_error("cannot open " + path + " for writing"); }
  f << text;
  if (!f) { throw std::runtime_error("write failed: " + path); }
}

std::string numbered(std::string const &out, Index i, Index n)
{
  if (n == 1) { return out; }
  auto const dot = out.rfind('.');
  auto const stem = dot == std::string::npos ? out : out.substr(0, dot);
  auto const ext = dot == std::string::npos ? std::string(".cim") : out.substr(dot);
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%04lld", static_cast<long long>(i));
  return stem + buf + ext;
}

// Flat key = value files: keys without a section belong to the invoked subcommand.
struct FlatConfig : CLI::ConfigINI
{
  std::string subcommand;

  std::vector<CLI::ConfigItem> from_config(std::istream &input) const override
  {
    auto items = CLI::ConfigINI::from_config(input);
    for (auto &it : items) {
      if (it.parents.empty()) { it.parents = {subcommand}; }
    }
    return items;
  }
};

struct Common
{
  std::uint64_t seed = 0;
  std::string out;
};

CLI::App *subcommand(CLI::App &app, char const *name, char const *help, Common &c)
{
  auto *s = app.add_subcommand(name, help);
  s->fallthrough();
  s->add_option("--seed", c.seed, "random seed")->capture_default_str();
  s->add_option("--out", c.out, "output path")->required();
  return s;
}

void phantom_options(CLI::App *s, PhantomSpec &p)
{
  s->add_option("--height", p.height, "image height")->capture_default_str();
  s->add_option("--width", p.width, "image width")->capture_default_str();
  s->add_option("--frames", p.frames, "frames (or slices with --volume)")->capture_default_str();
  s->add_option("--ellipses", p.n_ellipses, "feature ellipses per phantom")->capture_default_str();
  s->add_option("--motion", p.motion, "fractional radius pulsation")->capture_default_str();
  s->add_option("--phase-roll", p.phase_roll, "peak smooth phase in radians")->capture_default_str();
  s->add_option("--intensity", p.intensity, "peak magnitude scale")->capture_default_str();
  s->add_flag("--volume", p.volume, "slice-stacked ellipsoids instead of cine frames");
}

void augment_options(CLI::App *s, AugmentSpec &a)
{
  s->add_option("--sigma-lo", a.sigma_lo, "lower noise level")->capture_default_str();
  s->add_option("--sigma-hi", a.sigma_hi, "upper noise level")->capture_default_str();
  s->add_option("--accel-lo", a.accel_lo, "lowest acceleration")->capture_default_str();
  s->add_option("--accel-hi", a.accel_hi, "highest acceleration")->capture_default_str();
  s->add_option("--roughness-lo", a.roughness_lo, "lowest g-factor roughness")->capture_default_str();
  s->add_option("--roughness-hi", a.roughness_hi, "highest g-factor roughness")->capture_default_str();
  s->add_option("--filter-max", a.filter_strength_max, "largest Hann filter strength")->capture_default_str();
  s->add_option("--partial-fourier", a.partial_fourier, "partial Fourier fractions to draw from")
      ->delimiter(',')
      ->capture_default_str();
}

struct ModelOptions
{
  std::string arch = "unet";
  std::string blocks = "TLG,TLG";
  ModelConfig cfg;
};

void model_options(CLI::App *s, ModelOptions &m)
{
  s->add_option("--arch", m.arch, "unet or hrnet")->check(CLI::IsMember({"unet", "hrnet"}))->capture_default_str();
  s->add_option("--blocks", m.blocks, "block strings per level, e.g. TLG,TLG")->capture_default_str();
  s->add_option("--channels", m.cfg.channels, "feature channels")->capture_default_str();
  s->add_option("--heads", m.cfg.heads, "attention heads")->capture_default_str();
  s->add_option("--window", m.cfg.window, "attention window")->capture_default_str();
  s->add_option("--stride", m.cfg.stride, "global attention stride")->capture_default_str();
  s->add_option("--mlp-ratio", m.cfg.mlp_ratio, "mlp expansion")->capture_default_str();
  s->add_option("--stages", m.cfg.stages, "hrnet stages")->capture_default_str();
  s->add_flag("--relative-bias", m.cfg.relative_bias, "learned relative position bias in local attention");
}

ModelConfig finish(ModelOptions const &m)
{
  ModelConfig c = m.cfg;
  c.kind = parse_arch(m.arch);
  c.blocks = parse_level_configs(m.blocks);
  c.validate();
  return c;
}

void emit_metrics(std::string const &out, std::vector<MetricsRecord> const &recs, json extra = json::object())
{
  if (ends_with(out, ".json")) {
    json rows = json::array();
    for (auto const &r : recs) {
      rows.push_back({{"sample_id", r.sample_id}, {"mse", r.mse}, {"l1", r.l1}, {"psnr", r.psnr}, {"ssim", r.ssim}});
    }
    extra["records"] = rows;
    extra["mean_psnr"] = mean_psnr(recs);
    write_text(out, extra.dump(2) + "\n");
    return;
  }
  std::string s = metrics_csv_header() + "\n";
  for (auto const &r : recs) { s += to_csv_row(r) + "\n"; }
  write_text(out, s);
}

std::vector<ProbePoint> probe_grid(ComplexImage const &y, Index n, double eps, std::uint64_t seed)
{
  Rng rng(derive_seed(seed, 0, 51));
  Index const m = kProfileHalfWidth;
  std::uniform_int_distribution<Index> t(0, y.frames - 1), h(m, y.height - m - 1), w(m, y.width - m - 1);
  std::vector<ProbePoint> pts;
  for (Index i = 0; i < n; ++i) { pts.push_back({t(rng), h(rng), w(rng), eps}); }
  return pts;
}

} // namespace

int main(int argc, char **argv)
{
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"imformer: transformer denoising of complex MR image series"};
  app.require_subcommand(1);
  auto flat = std::make_shared<FlatConfig>();
  app.config_formatter(flat);
  app.set_config("--config", "", "flat key = value file; keys mirror the long flag names, command line wins");
  app.allow_config_extras(CLI::config_extras_mode::error);
  for (int i = 1; i < argc; ++i) {
    if (argv[i][0] != '-') {
      flat->subcommand = argv[i];
      break;
    }
  }

  Common c_synth, c_gf, c_cor, c_train, c_den, c_eval, c_probe, c_met;

  PhantomSpec synth_p;
  Index synth_count = 1;
  auto *synth = subcommand(app, "synth", "generate noise-free cine phantoms (CIM)", c_synth);
  phantom_options(synth, synth_p);
  synth->add_option("--count", synth_count, "number of phantoms; files are numbered when > 1")->capture_default_str();

  Index gf_h = 64, gf_w = 64;
  int gf_accel = 2;
  double gf_rough = 2.0;
  auto *gf = subcommand(app, "gfactor", "synthesize a g-factor map (float32 CIM)", c_gf);
  gf->add_option("--height", gf_h)->capture_default_str();
  gf->add_option("--width", gf_w)->capture_default_str();
  gf->add_option("--accel", gf_accel, "acceleration factor")->capture_default_str();
  gf->add_option("--roughness", gf_rough, "spatial roughness; 0 gives a constant map")->capture_default_str();

  std::string cor_in, cor_g, cor_g_out;
  AugmentSpec cor_a;
  bool cor_unit_g = false;
  auto *cor = subcommand(app, "corrupt", "add SNR-unit correlated noise to a clean image", c_cor);
  cor->add_option("--in", cor_in, "clean CIM image")->required()->check(CLI::ExistingFile);
  cor->add_option("--gfactor", cor_g,
                 "g-factor map; with it the filter strength and first partial Fourier fraction are used as given")
      ->check(CLI::ExistingFile);
  cor->add_option("--gfactor-out", cor_g_out, "write the g-factor map used");
  cor->add_flag("--no-gfactor", cor_unit_g, "g == 1 everywhere");
  augment_options(cor, cor_a);

  ModelOptions tr_m;
  TrainConfig tr;
  PhantomSpec tr_p;
  Index tr_n = 512;
  std::vector<std::string> tr_data;
  std::string tr_hist, tr_opt = "adamw";
  bool no_noise_aug = false, no_g_aug = false, quiet = false;
  auto *train_cmd = subcommand(app, "train", "train a model; --out is the checkpoint path", c_train);
  model_options(train_cmd, tr_m);
  phantom_options(train_cmd, tr_p);
  augment_options(train_cmd, tr.augment);
  train_cmd->add_option("--data", tr_data, "clean CIM training images; phantoms are generated when absent")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--samples", tr_n, "number of generated phantoms")->capture_default_str();
  train_cmd->add_option("--epochs", tr.epochs)->capture_default_str();
  train_cmd->add_option("--batch", tr.batch_size, "patches per step")->capture_default_str();
  train_cmd->add_option("--patch-small", tr.patch_small, "patch size on even steps")->capture_default_str();
  train_cmd->add_option("--patch-large", tr.patch_large, "patch size on odd steps")->capture_default_str();
  train_cmd->add_option("--optimizer", tr_opt)->check(CLI::IsMember({"adamw", "sophia"}))->capture_default_str();
  train_cmd->add_option("--lr", tr.hyper.lr, "learning rate")->capture_default_str();
  train_cmd->add_option("--weight-decay", tr.hyper.weight_decay)->capture_default_str();
  train_cmd->add_option("--rho", tr.hyper.rho, "sophia clip")->capture_default_str();
  train_cmd->add_option("--curvature-interval", tr.hyper.curvature_interval, "sophia refresh period")
      ->capture_default_str();
  train_cmd->add_option("--val-fraction", tr.val_fraction)->capture_default_str();
  train_cmd->add_option("--w-mse", tr.loss.mse, "loss weight")->capture_default_str();
  train_cmd->add_option("--w-l1", tr.loss.l1, "loss weight")->capture_default_str();
  train_cmd->add_option("--w-perp", tr.loss.perpendicular, "loss weight")->capture_default_str();
  train_cmd->add_option("--w-psnr", tr.loss.psnr, "loss weight")->capture_default_str();
  train_cmd->add_flag("--no-noise-aug", no_noise_aug, "corrupt each training image once");
  train_cmd->add_flag("--no-gfactor-aug", no_g_aug, "g == 1 everywhere during training");
  train_cmd->add_option("--history", tr_hist, "per-epoch history (CSV, or JSON by extension); default <out>.history.csv");
  train_cmd->add_flag("--quiet", quiet, "no per-epoch progress on stderr");

  std::string den_model, den_in, den_g;
  DenoiseOptions den_o;
  auto *den = subcommand(app, "denoise", "denoise a CIM image with a checkpoint", c_den);
  den->add_option("--model", den_model, "checkpoint")->required()->check(CLI::ExistingFile);
  den->add_option("--in", den_in, "noisy CIM image")->required()->check(CLI::ExistingFile);
  den->add_option("--gfactor", den_g, "g-factor map; g == 1 when absent")->check(CLI::ExistingFile);
  den->add_option("--tile", den_o.tile, "tile size, 0 disables tiling")->capture_default_str();
  den->add_option("--overlap", den_o.overlap, "tile overlap")->capture_default_str();

  std::string ev_model;
  TestSetSpec ev_s;
  EvalOptions ev_o;
  bool ev_drawn = false;
  auto *ev = subcommand(app, "eval", "metrics of a checkpoint on a generated test set (CSV or JSON)", c_eval);
  ev->add_option("--model", ev_model, "checkpoint; omitted: metrics of the noisy inputs")->check(CLI::ExistingFile);
  ev->add_option("--height", ev_s.height)->capture_default_str();
  ev->add_option("--width", ev_s.width)->capture_default_str();
  ev->add_option("--frames", ev_s.frames)->capture_default_str();
  ev->add_option("--kinds", ev_s.kinds, "subset of 2d,2dt,3d")->delimiter(',')->capture_default_str();
  ev->add_option("--sigmas", ev_s.sigmas, "noise levels, one cell each")->delimiter(',')->capture_default_str();
  ev->add_flag("--drawn-sigma", ev_drawn, "draw sigma from the augmentation range instead of --sigmas");
  ev->add_option("--per-cell", ev_s.per_cell, "samples per (kind, sigma) cell")->capture_default_str();
  ev->add_flag("--unit-g", ev_o.unit_g_input, "feed g == 1 to the model");
  ev->add_option("--tile", ev_o.denoise.tile)->capture_default_str();
  ev->add_option("--overlap", ev_o.denoise.overlap)->capture_default_str();
  augment_options(ev, ev_s.augment);

  std::string pr_op = "identity", pr_in, pr_g;
  PhantomSpec pr_p;
  Index pr_points = 16;
  double pr_eps = kDefaultProbeEpsilon;
  auto *pr = subcommand(app, "probe", "local PSF and linearity of an operator (CSV or JSON)", c_probe);
  pr->add_option("--op", pr_op, "checkpoint path, identity, or blur:SIGMA")->capture_default_str();
  pr->add_option("--in", pr_in, "probed image; a phantom is generated when absent")->check(CLI::ExistingFile);
  pr->add_option("--gfactor", pr_g, "g-factor map for a model operator; g == 1 when absent")->check(CLI::ExistingFile);
  pr->add_option("--points", pr_points, "random probe points")->capture_default_str();
  pr->add_option("--epsilon", pr_eps, "impulse amplitude")->capture_default_str();
  phantom_options(pr, pr_p);

  std::string met_pred, met_ref;
  auto *met = subcommand(app, "metrics", "MSE, L1, PSNR and SSIM of two CIM images (CSV or JSON)", c_met);
  met->add_option("--pred", met_pred)->required()->check(CLI::ExistingFile);
  met->add_option("--ref", met_ref)->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      for (Index i = 0; i < synth_count; ++i) {
        PhantomSpec p = synth_p;
        p.seed = derive_seed(c_synth.seed, static_cast<std::uint64_t>(i), 11);
        write_image(numbered(c_synth.out, i, synth_count), gen_phantom(p));
      }
    } else if (*gf) {
      write_gfactor(c_gf.out, synth_gfactor(gf_h, gf_w, gf_accel, gf_rough, c_gf.seed));
    } else if (*cor) {
      auto const clean = read_image(cor_in);
      cor_a.gfactor = !cor_unit_g;
      NoisyPair p = draw_corruption(clean, cor_a, c_cor.seed);
      if (!cor_g.empty()) {
        GFactorMap const g = read_gfactor(cor_g);
        NoiseSpec ns;
        ns.acceleration = g.acceleration;
        ns.sigma_lo = cor_a.sigma_lo;
        ns.sigma_hi = cor_a.sigma_hi;
        ns.filter = cor_a.filter_strength_max > 0 ? KSpaceFilter::hann(cor_a.filter_strength_max) : KSpaceFilter::identity();
        ns.partial_fourier = cor_a.partial_fourier.front();
        ns.seed = c_cor.seed;
        auto r = corrupt(clean, g, ns);
        p = {std::move(r.noisy), g, r.sigma};
      }
      write_image(c_cor.out, p.noisy);
      if (!cor_g_out.empty()) { write_gfactor(cor_g_out, p.g); }
      std::fprintf(stderr, "sigma %.6g\n", p.sigma);
    } else if (*train_cmd) {
      ModelConfig const mc = finish(tr_m);
      tr.seed = c_train.seed;
      tr.optimizer = parse_optimizer(tr_opt);
      tr.noise_aug = !no_noise_aug;
      tr.augment.gfactor = !no_g_aug;
      std::vector<ComplexImage> data;
      if (tr_data.empty()) {
        data = make_phantoms(tr_n, tr_p, c_train.seed);
      } else {
        for (auto const &f : tr_data) { data.push_back(read_image(f)); }
      }
      auto const res = train<Scalar>(mc, tr, data, [&](EpochRecord const &e) {
        if (!quiet) {
          std::fprintf(stderr, "epoch %lld steps %lld train %.6g val %.6g\n", static_cast<long long>(e.epoch),
                       static_cast<long long>(e.steps), e.train_loss, e.val_loss);
        }
      });
      save_checkpoint(c_train.out, res.model);
      std::string const hist = tr_hist.empty() ? c_train.out + ".history.csv" : tr_hist;
      if (ends_with(hist, ".json")) {
        json j = {{"best_epoch", res.best_epoch}, {"diverged", res.diverged}, {"message", res.message},
                  {"train_count", res.train_count}, {"val_count", res.val_count}, {"seconds", res.seconds},
                  {"model", to_json(mc)}};
        for (auto const &e : res.history) {
          j["history"].push_back({{"epoch", e.epoch}, {"steps", e.steps}, {"train_loss", e.train_loss},
                                  {"val_loss", e.val_loss}});
        }
        write_text(hist, j.dump(2) + "\n");
      } else {
        std::string s = "epoch,steps,train_loss,val_loss\n";
        char buf[128];
        for (auto const &e : res.history) {
          std::snprintf(buf, sizeof buf, "%lld,%lld,%.17g,%.17g\n", static_cast<long long>(e.epoch),
                        static_cast<long long>(e.steps), e.train_loss, e.val_loss);
          s += buf;
        }
        write_text(hist, s);
      }
      if (res.diverged) {
        std::fprintf(stderr, "training diverged: %s\n", res.message.c_str());
        return 3;
      }
    } else if (*den) {
      auto const m = load_checkpoint<Scalar>(den_model);
      auto const noisy = read_image(den_in);
      GFactorMap const g = den_g.empty() ? GFactorMap::constant(noisy.height, noisy.width, 1.0) : read_gfactor(den_g);
      write_image(c_den.out, denoise(m, noisy, g, den_o));
    } else if (*ev) {
      ev_s.seed = c_eval.seed;
      if (ev_drawn) { ev_s.sigmas.clear(); }
      auto const set = make_testset(ev_s);
      auto const noisy = evaluate_noisy(set);
      if (ev_model.empty()) {
        emit_metrics(c_eval.out, noisy);
      } else {
        auto const m = load_checkpoint<Scalar>(ev_model);
        emit_metrics(c_eval.out, evaluate(m, set, ev_o), {{"noisy_mean_psnr", mean_psnr(noisy)}});
      }
    } else if (*pr) {
      ComplexImage y;
      if (pr_in.empty()) {
        pr_p.seed = c_probe.seed;
        y = gen_phantom(pr_p);
      } else {
        y = read_image(pr_in);
      }
      ImageOperator op;
      if (pr_op == "identity") {
        op = [](ComplexImage const &x) { return x; };
      } else if (pr_op.rfind("blur:", 0) == 0) {
        op = gaussian_blur(std::stod(pr_op.substr(5)));
      } else {
        auto m = std::make_shared<Model<Scalar>>(load_checkpoint<Scalar>(pr_op));
        auto g = std::make_shared<GFactorMap>(pr_g.empty() ? GFactorMap::constant(y.height, y.width, 1.0)
                                                           : read_gfactor(pr_g));
        op = [m, g](ComplexImage const &x) { return denoise(*m, x, *g); };
      }
      auto const rep = probe_operator(op, y, probe_grid(y, pr_points, pr_eps, c_probe.seed));
      write_text(c_probe.out, ends_with(c_probe.out, ".json") ? probe_json(rep).dump(2) + "\n" : probe_csv(rep));
    } else if (*met) {
      emit_metrics(c_met.out, {compute_metrics(met_pred, read_image(met_pred), read_image(met_ref))});
    }
  } catch (std::exception const &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
