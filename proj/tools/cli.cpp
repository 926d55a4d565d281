#include "cli.hpp"

#include "bnerf/data.hpp"
#include "bnerf/metrics.hpp"
#include "bnerf/optim.hpp"
#include "bnerf/png_io.hpp"
#include "bnerf/suites.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

namespace bnerf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string git_blob_sha1(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
    throw std::runtime_error("SHA-1 digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string dataset;
  std::string loss_mode = "baseline";
  int iterations = 20000;
  int batch_rays = 1024;
  double lr = 5e-3;
  int warmup = 2000;
  int n_samples = 64;
  std::string rig = "orbit_unobserved";
  int train_count = 2;
  std::string scene = "duo";
  std::string suite = "all";
  std::string oracle_mode = "all";
  double tolerance = 0.0;
  bool normalized_depth = false;
  bool gradient_through_t = false;
  int grid = 32;
  int image_size = 64;
};

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw UsageError("cannot read " + p.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw UsageError("cannot write " + p.string());
  f << text;
}

json read_json_file(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw bnerf::ParseError(p.string() + ": " + e.what());
  }
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Regular files under `dir`, as sorted paths relative to it.
std::vector<fs::path> list_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  return files;
}

class Manifest {
 public:
  Manifest(std::string command, json config, std::uint64_t seed)
      : command_(std::move(command)), config_(std::move(config)), seed_(seed), started_(utc_now()) {}

  void add_input(const std::string& label, const fs::path& path) {
    if (fs::is_directory(path)) {
      for (const auto& rel : list_files(path)) add_input_file(label + "/" + rel.generic_string(), path / rel);
    } else {
      add_input_file(label, path);
    }
  }

  void add_output(const fs::path& relative) { outputs_.push_back(relative.generic_string()); }

  /// Writes manifest_<command>.json into `dir`; the manifest lists itself.
  fs::path write(const fs::path& dir) {
    const std::string name = "manifest_" + command_ + ".json";
    add_output(name);
    std::sort(outputs_.begin(), outputs_.end());
    outputs_.erase(std::unique(outputs_.begin(), outputs_.end()), outputs_.end());
    std::string listing;
    for (const auto& [path, hash] : inputs_) listing += hash + " " + path + "\n";
    listing += config_.dump();
    json inputs = json::array();
    for (const auto& [path, hash] : inputs_) inputs.push_back({{"path", path}, {"sha1", hash}});
    const json doc = {{"command", command_},
                      {"config", config_},
                      {"seed", seed_},
                      {"inputs", inputs},
                      {"input_hash", git_blob_sha1(listing)},
                      {"started_utc", started_},
                      {"finished_utc", utc_now()},
                      {"outputs", outputs_}};
    write_file(dir / name, doc.dump(2) + "\n");
    return dir / name;
  }

 private:
  void add_input_file(const std::string& label, const fs::path& path) {
    inputs_[label] = git_blob_sha1(read_file(path));
  }

  std::string command_;
  json config_;
  std::uint64_t seed_;
  std::string started_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
};

const char* target_name(RenderTarget t) { return t == RenderTarget::rgb ? "rgb" : "depth"; }

RenderTarget parse_target(const std::string& s) {
  if (s == "rgb") return RenderTarget::rgb;
  if (s == "depth") return RenderTarget::depth;
  throw bnerf::ParseError("unknown target '" + s + "'");
}

fs::path require_dataset(const std::string& path) {
  if (path.empty()) throw UsageError("--dataset is required");
  if (!fs::is_directory(path)) throw UsageError("dataset directory not found: " + path);
  return fs::absolute(path).lexically_normal();
}

fs::path require_out(const std::string& path) {
  if (path.empty()) throw UsageError("--out is required");
  return fs::path(path);
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const Options& o, std::ostream& out) {
  const fs::path dir = require_out(o.out);
  RigSpec spec;
  spec.kind = parse_rig_kind(o.rig);
  spec.train_count = o.train_count;
  spec.seed = o.seed;
  spec.width = spec.height = o.image_size;
  const auto names = builtin_scene_names();
  if (std::find(names.begin(), names.end(), o.scene) == names.end())
    throw UsageError("unknown scene '" + o.scene + "'");
  const DatasetKinds kinds = default_kinds(spec.kind);
  const Dataset ds = generate_dataset(builtin_scene(o.scene), spec, kinds);

  fs::create_directories(dir);
  save_dataset(dir, ds);
  const json rig = {{"rig", o.rig},
                    {"scene", o.scene},
                    {"train_count", ds.train.size()},
                    {"test_count", ds.test.size()},
                    {"seed", o.seed},
                    {"width", spec.width},
                    {"height", spec.height},
                    {"rgb", kinds.rgb},
                    {"depth", kinds.depth}};
  write_file(dir / "rig.json", rig.dump(2) + "\n");

  Manifest m("gen_data", rig, o.seed);
  for (const auto& f : list_files(dir))
    if (f.filename().string().rfind("manifest_", 0) != 0) m.add_output(f);
  m.write(dir);
  out << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test views ("
      << (kinds.rgb ? (kinds.depth ? "rgb+depth" : "rgb") : "depth") << ") to " << dir.string() << "\n";
  return kExitSuccess;
}

// ---------------------------------------------------------------------------
// train

bool all_have(const std::vector<Frame>& frames, RenderTarget t) {
  return !frames.empty() && std::all_of(frames.begin(), frames.end(), [t](const Frame& f) {
           return t == RenderTarget::rgb ? !f.rgb.data.empty() : !f.depth.data.empty();
         });
}

int cmd_train(const Options& o, std::ostream& out) {
  const fs::path dataset = require_dataset(o.dataset);
  const fs::path dir = require_out(o.out);
  const Dataset ds = load_dataset(dataset);

  TrainConfig c;
  c.loss_mode = parse_loss_mode(o.loss_mode);
  c.iterations = o.iterations;
  c.batch_rays = o.batch_rays;
  c.learning_rate = o.lr;
  c.warmup_iterations = o.warmup;
  c.seed = o.seed;
  c.n_samples = o.n_samples;
  c.normalized_depth = o.normalized_depth;
  c.gradient_through_T = o.gradient_through_t;
  c.resolution = {o.grid, o.grid, o.grid};
  c.background = ds.scene.background;
  c.validate();

  RenderTarget target = all_have(ds.train, RenderTarget::rgb) ? RenderTarget::rgb : RenderTarget::depth;
  if (auto required = required_target(c.loss_mode)) target = *required;
  if (!all_have(ds.train, target))
    throw UsageError("loss mode " + std::string(to_string(c.loss_mode)) + " needs " + target_name(target) +
                     " training images, which dataset " + dataset.string() + " does not have");

  fs::create_directories(dir);
  const TrainState st = train(c, make_training_set(ds, target), ds.scene.bounds);

  save_checkpoint(st.field, dir / "field.bnrf");
  write_log_csv(dir / "train_log.csv", st.log, false);
  write_log_csv(dir / "timing.csv", st.log, true);
  const double final_loss = st.log.empty() ? 0.0 : st.log.back().loss;
  const json run = {{"config", to_json(c)},
                    {"target", target_name(target)},
                    {"dataset", dataset.string()},
                    {"scene", ds.scene.name},
                    {"train_count", ds.train.size()},
                    {"seed", c.seed},
                    {"final_loss", final_loss},
                    {"rejected_rays", st.rejected_rays},
                    {"guard_fired", st.guard.fired()},
                    {"checkpoint", "field.bnrf"}};
  write_file(dir / "run.json", run.dump(2) + "\n");

  Manifest m("train", to_json(c), c.seed);
  m.add_input("dataset", dataset);
  for (const char* f : {"field.bnrf", "train_log.csv", "timing.csv", "run.json"}) m.add_output(f);
  m.write(dir);
  char line[128];
  std::snprintf(line, sizeof line, "%.9g", final_loss);
  out << "trained " << to_string(c.loss_mode) << " (" << target_name(target) << ") for " << c.iterations
      << " iterations, final loss " << line << "\n";
  return kExitSuccess;
}

// ---------------------------------------------------------------------------
// render

struct RunInfo {
  fs::path dir;
  json run;
  fs::path dataset;
  LossMode mode = LossMode::baseline;
  RenderTarget target = RenderTarget::rgb;
};

RunInfo load_run(const fs::path& dir, const std::string& dataset_override) {
  if (!fs::exists(dir / "run.json")) throw UsageError("no run.json in " + dir.string() + "; run train first");
  RunInfo r;
  r.dir = dir;
  r.run = read_json_file(dir / "run.json");
  try {
    r.dataset = dataset_override.empty() ? fs::path(r.run.at("dataset").get<std::string>())
                                         : require_dataset(dataset_override);
    r.mode = parse_loss_mode(r.run.at("config").at("loss_mode").get<std::string>());
    r.target = parse_target(r.run.at("target").get<std::string>());
  } catch (const json::exception& e) {
    throw bnerf::ParseError((dir / "run.json").string() + ": " + e.what());
  }
  return r;
}

int cmd_render(const Options& o, const CLI::App& sub, std::ostream& out, std::ostream& err) {
  const RunInfo r = load_run(require_out(o.out), o.dataset);
  const Dataset ds = load_dataset(r.dataset);
  const json& cfg = r.run.at("config");
  const auto act = cfg.at("density_activation").get<std::string>() == "softplus" ? DensityActivation::softplus
                                                                                  : DensityActivation::sigmoid;
  const UncertainField field = load_checkpoint(r.dir / "field.bnrf", act);
  const auto expected = cfg.at("resolution").get<GridResolution>();
  if (field.resolution() != expected)
    err << "warning: checkpoint resolution " << field.resolution()[0] << "x" << field.resolution()[1] << "x"
        << field.resolution()[2] << " differs from the run config\n";

  ViewOptions v;
  v.mode = r.mode;
  v.target = r.target;
  v.n_samples = sub.count("--n-samples") ? o.n_samples : cfg.at("n_samples").get<int>();
  v.background = ds.scene.background;
  v.normalized_depth = o.normalized_depth || cfg.at("normalized_depth").get<bool>();

  std::vector<RenderedView> views;
  double max_variance = 0.0;
  for (const auto& f : ds.test) {
    views.push_back(render_view(field, f.camera, v));
    for (double x : views.back().variance.data) max_variance = std::max(max_variance, x);
  }

  Manifest m("render", {{"n_samples", v.n_samples}, {"normalized_depth", v.normalized_depth}}, r.run.at("seed"));
  m.add_input("checkpoint", r.dir / "field.bnrf");
  m.add_input("run.json", r.dir / "run.json");
  m.add_input("dataset/poses.json", r.dataset / "poses.json");
  json index = json::array();
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto& f = ds.test[i];
    const auto& view = views[i];
    const fs::path base = fs::path("renders") / f.name;
    fs::create_directories(r.dir / base.parent_path());
    auto emit = [&](const std::string& suffix) {
      m.add_output(base.string() + suffix);
      return r.dir / (base.string() + suffix);
    };
    if (r.target == RenderTarget::rgb) {
      write_png8(emit(".png"), view.value);
    } else {
      write_png16(emit(".png"), view.value, f.camera.far / 65535.0);
    }
    write_f32(emit(".f32"), view.value);
    write_f32(emit("_var.f32"), view.variance);
    Image var_vis = view.variance;
    if (var_vis.channels == 3) {
      var_vis = Image(view.variance.width, view.variance.height, 1);
      for (std::size_t p = 0; p < var_vis.data.size(); ++p)
        var_vis.data[p] = (view.variance.data[3 * p] + view.variance.data[3 * p + 1] + view.variance.data[3 * p + 2]) / 3.0;
    }
    for (double& x : var_vis.data) x = max_variance > 0.0 ? x / max_variance : 0.0;
    write_png8(emit("_var.png"), var_vis);
    double mean_var = 0.0;
    for (double x : view.variance.data) mean_var += x;
    mean_var /= static_cast<double>(view.variance.data.size());
    index.push_back({{"name", f.name}, {"mean_variance", mean_var}});
  }
  const json doc = {{"mode", to_string(r.mode)},
                    {"target", target_name(r.target)},
                    {"variance_png_scale", max_variance},
                    {"views", index}};
  write_file(r.dir / "renders" / "index.json", doc.dump(2) + "\n");
  m.add_output("renders/index.json");
  m.write(r.dir);
  out << "rendered " << views.size() << " test views to " << (r.dir / "renders").string() << "\n";
  return kExitSuccess;
}

// ---------------------------------------------------------------------------
// eval

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.8g", x);
  return buf;
}

constexpr const char* kMetricColumns = "psnr,ssim,lpips,absrel,rmse_log,log10,delta1,delta2,delta3";

struct ViewScore {
  std::optional<double> psnr, ssim;
  std::optional<DepthMetrics> depth;
};

struct RunScore {
  std::string scene, mode, target;
  std::size_t train_count = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, ViewScore>> views;
};

// Mean over views that define each metric; "n/a" when none do.
std::string metric_cells(const std::vector<const ViewScore*>& views) {
  auto mean = [&](auto get) -> std::string {
    double s = 0.0;
    int n = 0;
    for (const auto* v : views)
      if (auto x = get(*v)) s += *x, ++n;
    return n ? fmt(s / n) : "n/a";
  };
  auto depth = [&](auto member) {
    return mean([member](const ViewScore& v) -> std::optional<double> {
      return v.depth ? std::optional<double>((*v.depth).*member) : std::nullopt;
    });
  };
  return mean([](const ViewScore& v) { return v.psnr; }) + "," + mean([](const ViewScore& v) { return v.ssim; }) +
         ",n/a," + depth(&DepthMetrics::absrel) + "," + depth(&DepthMetrics::rmse_log) + "," +
         depth(&DepthMetrics::log10_err) + "," + depth(&DepthMetrics::delta1) + "," + depth(&DepthMetrics::delta2) +
         "," + depth(&DepthMetrics::delta3);
}

int cmd_eval(const Options& o, std::ostream& out) {
  const fs::path root = require_out(o.out);
  if (!fs::is_directory(root)) throw UsageError("run directory not found: " + root.string());
  std::vector<fs::path> run_dirs;
  if (fs::exists(root / "run.json")) {
    run_dirs.push_back(root);
  } else {
    for (const auto& rel : list_files(root))
      if (rel.filename() == "run.json") run_dirs.push_back(root / rel.parent_path());
  }
  if (run_dirs.empty()) throw UsageError("no run.json found under " + root.string());

  std::vector<RunInfo> runs;
  std::vector<Dataset> datasets;
  std::vector<std::string> missing;
  for (const auto& d : run_dirs) {
    runs.push_back(load_run(d, o.dataset));
    datasets.push_back(load_dataset(runs.back().dataset));
    for (const auto& f : datasets.back().test) {
      const fs::path p = d / "renders" / (f.name + ".f32");
      if (!fs::exists(p)) missing.push_back(p.string());
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing renders (run render first):";
    for (const auto& p : missing) msg += "\n  " + p;
    throw UsageError(msg);
  }

  Manifest m("eval", {{"runs", run_dirs.size()}}, 0);
  std::vector<RunScore> scores;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const auto& r = runs[k];
    const auto& ds = datasets[k];
    RunScore s;
    s.scene = r.run.value("scene", ds.scene.name);
    s.mode = std::string(to_string(r.mode));
    s.target = target_name(r.target);
    s.train_count = r.run.value("train_count", ds.train.size());
    s.seed = r.run.value("seed", std::uint64_t{0});
    for (const auto& f : ds.test) {
      const fs::path p = r.dir / "renders" / (f.name + ".f32");
      m.add_input(fs::relative(p, root).generic_string(), p);
      const int w = f.camera.intrinsics.width, h = f.camera.intrinsics.height;
      ViewScore v;
      if (r.target == RenderTarget::rgb) {
        if (f.rgb.data.empty()) throw UsageError("dataset has no RGB ground truth for " + f.name);
        const Image pred = read_f32(p, w, h, 3);
        v.psnr = psnr(pred, f.rgb);
        v.ssim = ssim(pred, f.rgb);
      } else {
        if (f.depth.data.empty()) throw UsageError("dataset has no depth ground truth for " + f.name);
        try {
          v.depth = depth_metrics(read_f32(p, w, h, 1), f.depth);
        } catch (const UndefinedMetric&) {
          // No valid ground-truth pixel in this view; it drops out of the depth means.
        }
      }
      s.views.emplace_back(f.name, v);
    }
    scores.push_back(std::move(s));
  }

  const std::string key_header = "scene,mode,target,train_count,seed";
  std::string table = key_header + ",views," + kMetricColumns + "\n";
  std::string per_view = "run," + key_header + ",view," + kMetricColumns + "\n";
  std::map<std::tuple<std::string, std::string, std::string, std::size_t>, std::vector<const RunScore*>> groups;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const auto& s = scores[k];
    const std::string key = s.scene + "," + s.mode + "," + s.target + "," + std::to_string(s.train_count) + "," +
                            std::to_string(s.seed);
    std::vector<const ViewScore*> vs;
    for (const auto& [name, v] : s.views) {
      vs.push_back(&v);
      per_view += fs::relative(runs[k].dir, root).generic_string() + "," + key + "," + name + "," +
                  metric_cells({&v}) + "\n";
    }
    table += key + "," + std::to_string(vs.size()) + "," + metric_cells(vs) + "\n";
    groups[{s.scene, s.mode, s.target, s.train_count}].push_back(&s);
  }

  // Seed-averaged view: per-run means, then the mean over runs.
  std::string summary = "scene,mode,target,train_count,runs," + std::string(kMetricColumns) + "\n";
  for (const auto& [key, members] : groups) {
    std::vector<ViewScore> run_means;
    for (const auto* s : members) {
      ViewScore mean;
      double p = 0, q = 0;
      int n_rgb = 0, n_depth = 0;
      DepthMetrics d;
      for (const auto& [name, v] : s->views) {
        if (v.psnr) p += *v.psnr, q += *v.ssim, ++n_rgb;
        if (v.depth) {
          d.absrel += v.depth->absrel, d.rmse_log += v.depth->rmse_log, d.log10_err += v.depth->log10_err;
          d.delta1 += v.depth->delta1, d.delta2 += v.depth->delta2, d.delta3 += v.depth->delta3;
          ++n_depth;
        }
      }
      if (n_rgb) mean.psnr = p / n_rgb, mean.ssim = q / n_rgb;
      if (n_depth) {
        for (double* x : {&d.absrel, &d.rmse_log, &d.log10_err, &d.delta1, &d.delta2, &d.delta3}) *x /= n_depth;
        mean.depth = d;
      }
      run_means.push_back(mean);
    }
    std::vector<const ViewScore*> ptrs;
    for (const auto& v : run_means) ptrs.push_back(&v);
    const auto& [scene, mode, target, count] = key;
    summary += scene + "," + mode + "," + target + "," + std::to_string(count) + "," +
               std::to_string(members.size()) + "," + metric_cells(ptrs) + "\n";
  }

  write_file(root / "metrics.csv", table);
  write_file(root / "metrics_views.csv", per_view);
  write_file(root / "metrics_summary.csv", summary);
  for (const char* f : {"metrics.csv", "metrics_views.csv", "metrics_summary.csv"}) m.add_output(f);
  m.write(root);
  out << table;
  return kExitSuccess;
}

// ---------------------------------------------------------------------------
// oracle

int cmd_oracle(const Options& o, const CLI::App& sub, std::ostream& out) {
  std::vector<std::string> suites;
  if (o.suite == "all") {
    suites = suite_names();
  } else if (std::find(suite_names().begin(), suite_names().end(), o.suite) != suite_names().end()) {
    suites = {o.suite};
  } else {
    throw UsageError("unknown oracle suite '" + o.suite + "'");
  }
  SuiteOptions so;
  so.seed = o.seed;
  if (sub.count("--tolerance")) so.tolerance = o.tolerance;
  if (o.oracle_mode != "all") so.mode = parse_loss_mode(o.oracle_mode);

  json doc = {{"seed", o.seed}, {"suites", json::object()}};
  bool passed = true;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %-36s %12s %s %-10s %s\n", "suite", "check", "value", " ", "tolerance",
                "result");
  out << line;
  for (const auto& name : suites) {
    json checks = json::array();
    for (const auto& c : run_suite(name, so)) {
      passed = passed && c.passed;
      std::snprintf(line, sizeof line, "%-10s %-36s %12.4e %s %-10.3g %s\n", c.suite.c_str(), c.name.c_str(), c.value,
                    c.comparison == Comparison::below ? "<" : ">", c.tolerance, c.passed ? "PASS" : "FAIL");
      out << line;
      checks.push_back(to_json(c));
    }
    doc["suites"][name] = checks;
  }
  doc["passed"] = passed;

  if (!o.out.empty()) {
    const fs::path dir(o.out);
    fs::create_directories(dir);
    const std::string file = "oracle_" + o.suite + ".json";
    write_file(dir / file, doc.dump(2) + "\n");
    Manifest m("oracle_" + o.suite,
               {{"suite", o.suite}, {"mode", o.oracle_mode}, {"tolerance", so.tolerance ? json(*so.tolerance) : json()}},
               o.seed);
    m.add_output(file);
    m.write(dir);
  }
  out << (passed ? "all checks passed\n" : "some checks FAILED\n");
  return passed ? kExitSuccess : kExitFailure;
}

// ---------------------------------------------------------------------------
// argument parsing

std::string normalize_key(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

/// Pulls `--config <path>` out of the arguments, if present.
std::string find_config(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return {};
}

/// Config entries as flag tokens for `sub`. They are parsed before the command
/// line, and every option keeps its last value, so flags override the file.
std::vector<std::string> config_tokens(const fs::path& path, const CLI::App& root, const CLI::App& sub) {
  if (!fs::exists(path)) throw UsageError("config file not found: " + path.string());
  const json doc = read_json_file(path);
  if (!doc.is_object()) throw bnerf::ParseError(path.string() + ": expected a JSON object");
  std::vector<std::string> tokens;
  for (const auto& [raw_key, value] : doc.items()) {
    const std::string key = normalize_key(raw_key);
    const std::string flag = "--" + key;
    if (key == "config") throw UsageError(path.string() + ": config files cannot nest");
    if (!sub.get_option_no_throw(flag)) {
      bool known = false;
      for (const auto* other : root.get_subcommands({}))
        known = known || other->get_option_no_throw(flag) != nullptr;
      if (!known) throw UsageError(path.string() + ": unknown key '" + raw_key + "'");
      continue;  // belongs to another subcommand
    }
    if (value.is_boolean()) {
      tokens.push_back(flag + "=" + (value.get<bool>() ? "true" : "false"));
    } else if (value.is_string()) {
      tokens.push_back(flag);
      tokens.push_back(value.get<std::string>());
    } else if (value.is_number()) {
      tokens.push_back(flag);
      tokens.push_back(value.dump());
    } else {
      throw UsageError(path.string() + ": key '" + raw_key + "' must be a string, number or boolean");
    }
  }
  return tokens;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Uncertainty-aware volume rendering experiments", "bnerf"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "JSON file of flag values; command-line flags take precedence");
    s->add_option("--seed", o.seed, "Root seed");
  };
  auto* gen = app.add_subcommand("gen-data", "Generate a procedural dataset");
  common(gen);
  gen->add_option("--out", o.out, "Dataset directory")->required();
  gen->add_option("--rig", o.rig, "orbit_unobserved | forward_observed | orbit_depth");
  gen->add_option("--train-count", o.train_count, "Training views");
  gen->add_option("--scene", o.scene, "Builtin scene name");
  gen->add_option("--image-size", o.image_size, "Square image size in pixels")->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "Train a field");
  common(tr);
  tr->add_option("--dataset", o.dataset, "Dataset directory")->required();
  tr->add_option("--out", o.out, "Run directory")->required();
  tr->add_option("--loss-mode", o.loss_mode, "Training objective");
  tr->add_option("--iterations", o.iterations, "Training iterations, warmup included");
  tr->add_option("--batch-rays", o.batch_rays, "Rays per iteration");
  tr->add_option("--lr", o.lr, "Adam learning rate");
  tr->add_option("--warmup", o.warmup, "Baseline-loss iterations before the selected objective");
  tr->add_option("--n-samples", o.n_samples, "Samples per ray");
  tr->add_option("--grid", o.grid, "Voxels per axis")->check(CLI::PositiveNumber);
  tr->add_flag("--normalized-depth", o.normalized_depth, "Report depth divided by opacity");
  tr->add_flag("--gradient-through-t", o.gradient_through_t, "Occupancy modes: differentiate through T");

  auto* rd = app.add_subcommand("render", "Render test views and variance maps of a trained run");
  common(rd);
  rd->add_option("--out", o.out, "Run directory")->required();
  rd->add_option("--dataset", o.dataset, "Dataset directory (default: the one the run trained on)");
  rd->add_option("--n-samples", o.n_samples, "Samples per ray (default: training value)");
  rd->add_flag("--normalized-depth", o.normalized_depth, "Report depth divided by opacity");

  auto* ev = app.add_subcommand("eval", "Score rendered test views");
  common(ev);
  ev->add_option("--out", o.out, "Run directory, or a directory of runs")->required();
  ev->add_option("--dataset", o.dataset, "Dataset directory (default: each run's own)");

  auto* orc = app.add_subcommand("oracle", "Run Monte Carlo and finite-difference checks");
  common(orc);
  orc->add_option("name", o.suite, "Suite: moments | gradients | lognormal | breakdown | all");
  orc->add_option("--suite", o.suite, "Same as the positional suite name");
  orc->add_option("--loss-mode,--mode", o.oracle_mode, "gradients suite: one loss mode or all");
  orc->add_option("--tolerance", o.tolerance, "Overrides every check's threshold");
  orc->add_option("--out", o.out, "Directory for the JSON report");

  std::vector<std::string> tokens = args;
  try {
    const std::string config = find_config(args);
    if (!config.empty()) {
      const auto pos = std::find_if(tokens.begin(), tokens.end(), [&](const std::string& t) {
        return app.get_subcommand_no_throw(t) != nullptr;
      });
      if (pos == tokens.end()) throw UsageError("--config needs a subcommand");
      const auto extra = config_tokens(config, app, *app.get_subcommand(*pos));
      tokens.insert(pos + 1, extra.begin(), extra.end());
    }
    std::vector<std::string> reversed(tokens.rbegin(), tokens.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitSuccess : kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(o, out);
    if (*tr) return cmd_train(o, out);
    if (*rd) return cmd_render(o, *rd, out, err);
    if (*ev) return cmd_eval(o, out);
    return cmd_oracle(o, *orc, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const bnerf::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << " (iteration " << e.iteration << ", " << e.rays.size() << " rays)\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace bnerf::cli
