#include "cli.hpp"

#include "uika/avatar.hpp"
#include "uika/bench.hpp"
#include "uika/fitting.hpp"
#include "uika/io.hpp"
#include "uika/neural.hpp"
#include "uika/serialize.hpp"
#include "uika/service.hpp"
#include "uika/synthdata.hpp"

#include "CLI11.hpp"
#include "httplib.h"

#include <omp.h>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

namespace uika::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Bad flag combinations found after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Precision parse_precision(const std::string& s) {
  if (s == "float") return Precision::kFloat;
  if (s == "double") return Precision::kDouble;
  throw UsageError("--precision must be float or double");
}

Eigen::Vector3d parse_color(const std::vector<double>& v) {
  if (v.size() == 1) return Eigen::Vector3d::Constant(v[0]);
  if (v.size() != 3) throw UsageError("--background takes 1 or 3 comma-separated values");
  return {v[0], v[1], v[2]};
}

/// A JSON file that is either the object itself or a frame meta.json holding it under `key`.
json object_or_member(const fs::path& path, const char* key) {
  json j = io::read_json(path);
  if (j.is_object() && j.contains(key) && j[key].is_object()) return j[key];
  return j;
}

std::ofstream open_trace(const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open trace file " + path.string());
  return f;
}

/// Camera and background options shared by render and animate.
struct ViewOptions {
  std::string camera_file;
  int ring_view = -1;
  int ring_views = 9;
  int size = 64;
  std::vector<double> background;
  std::string precision = "double";

  void add(CLI::App* app) {
    app->add_option("--camera", camera_file, "camera JSON, or a dataset frame's meta.json")->check(CLI::ExistingFile);
    app->add_option("--ring-view", ring_view, "use view k of the dataset camera ring instead of --camera");
    app->add_option("--ring-views", ring_views, "views on the ring")->check(CLI::PositiveNumber);
    app->add_option("--size", size, "image size for --ring-view")->check(CLI::PositiveNumber);
    app->add_option("--background", background, "r,g,b in [0,1] (default: the meta.json background, else black)")
        ->delimiter(',');
    app->add_option("--precision", precision, "float or double")->check(CLI::IsMember({"float", "double"}));
  }

  Camera<double> camera() const {
    if (!camera_file.empty() && ring_view >= 0) throw UsageError("--camera and --ring-view are exclusive");
    if (!camera_file.empty()) return camera_from_json(object_or_member(camera_file, "camera"));
    if (ring_view >= 0) {
      if (ring_view >= ring_views) throw UsageError("--ring-view must be below --ring-views");
      return ring_cameras(ring_views, size, size)[ring_view];
    }
    throw UsageError("one of --camera or --ring-view is required");
  }

  Eigen::Vector3d bg() const {
    if (!background.empty()) return parse_color(background);
    if (!camera_file.empty()) {
      const json j = io::read_json(camera_file);
      if (j.is_object() && j.contains("background")) return parse_color(j["background"].get<std::vector<double>>());
    }
    return Eigen::Vector3d::Zero();
  }
};

PoseExpr load_theta(const fs::path& path, const CanonicalAvatar& a) {
  return pose_from_json(object_or_member(path, "theta"), a.num_shape, a.num_expr(), a.num_joints());
}

PoseExpr zero_theta(const CanonicalAvatar& a) {
  return pose_from_json(json::object(), a.num_shape, a.num_expr(), a.num_joints());
}

// ---------------------------------------------------------------------------

struct GenDataCmd {
  std::string out, model;
  DatasetConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--out", out, "output directory")->required();
    app->add_option("--model", model, "head model file (default: the built-in toy head)")->check(CLI::ExistingFile);
    app->add_option("--identities", cfg.identities)->check(CLI::PositiveNumber);
    app->add_option("--views", cfg.views)->check(CLI::PositiveNumber);
    app->add_option("--frames", cfg.frames)->check(CLI::PositiveNumber);
    app->add_option("--width", cfg.width)->check(CLI::PositiveNumber);
    app->add_option("--height", cfg.height)->check(CLI::PositiveNumber);
    app->add_option("--seed", cfg.seed);
    app->add_option("--supersample", cfg.supersample)->check(CLI::PositiveNumber);
    app->add_option("--expression-range", cfg.expression_range)->check(CLI::NonNegativeNumber);
    app->add_option("--keyframe-spacing", cfg.keyframe_spacing)->check(CLI::PositiveNumber);
  }

  json run() const {
    const HeadModel m = model.empty() ? generate_toy_head({}) : load_head_model(model);
    const Dataset ds = generate_dataset(m, cfg, out);
    return {{"dataset", out}, {"frames", ds.frames.size()}, {"identities", ds.identities.size()},
            {"model_hash", ds.model_hash}};
  }
};

struct FitCmd {
  std::string data, out, config, trace, precision;
  FitConfig cfg;
  CLI::Option *iterations, *lr, *identity, *views, *frames, *n_ref, *n_d, *seed, *res;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    app->add_option("--out", out, "avatar file to write")->required();
    app->add_option("--config", config, "FitConfig JSON; flags override it")->check(CLI::ExistingFile);
    app->add_option("--trace", trace, "per-step JSON lines");
    iterations = app->add_option("--iterations", cfg.iterations)->check(CLI::PositiveNumber);
    lr = app->add_option("--lr", cfg.learning_rate)->check(CLI::PositiveNumber);
    identity = app->add_option("--identity", cfg.identity)->check(CLI::NonNegativeNumber);
    views = app->add_option("--views", cfg.views, "training views, comma-separated")->delimiter(',');
    frames = app->add_option("--frames", cfg.frames, "training frames, comma-separated")->delimiter(',');
    n_ref = app->add_option("--n-ref", cfg.n_ref)->check(CLI::PositiveNumber);
    n_d = app->add_option("--n-d", cfg.n_d)->check(CLI::PositiveNumber);
    seed = app->add_option("--seed", cfg.seed);
    res = app->add_option("--attr-resolution", cfg.attr_resolution)->check(CLI::PositiveNumber);
    app->add_option("--precision", precision, "float or double")->check(CLI::IsMember({"float", "double"}));
  }

  json run(std::ostream&) const {
    FitConfig c = config.empty() ? FitConfig{} : FitConfig::from_json(io::read_json(config));
    if (*iterations) c.iterations = cfg.iterations;
    if (*lr) c.learning_rate = cfg.learning_rate;
    if (*identity) c.identity = cfg.identity;
    if (*views) c.views = cfg.views;
    if (*frames) c.frames = cfg.frames;
    if (*n_ref) c.n_ref = cfg.n_ref;
    if (*n_d) c.n_d = cfg.n_d;
    if (*seed) c.seed = cfg.seed;
    if (*res) c.attr_resolution = cfg.attr_resolution;
    if (!precision.empty()) c.precision = parse_precision(precision);
    c.validate();

    const auto t0 = std::chrono::steady_clock::now();
    const Dataset ds = load_dataset(data);
    std::ofstream trace_file;
    if (!trace.empty()) trace_file = open_trace(trace);
    const FitResult r = fit_avatar(ds, ds.model, c, trace.empty() ? nullptr : &trace_file);
    export_avatar(r.avatar, out);
    return {{"avatar", out},
            {"M", r.avatar.size()},
            {"iterations", r.trace.size()},
            {"final_loss", r.trace.back().loss},
            {"final_psnr", r.trace.back().psnr},
            {"sources", r.sources},
            {"seconds", seconds_since(t0)}};
  }
};

struct TrainCmd {
  std::vector<std::string> data;
  std::string out, config, trace, resume, precision;
  TrainConfig cfg;
  CLI::Option *steps, *lr, *n_ref, *n_d, *seed, *every, *stop;

  void add(CLI::App* app) {
    app->add_option("--data", data, "dataset directories")->required()->check(CLI::ExistingDirectory);
    app->add_option("--out", out, "checkpoint to write")->required();
    app->add_option("--config", config, "TrainConfig JSON; flags override it")->check(CLI::ExistingFile);
    app->add_option("--trace", trace, "per-step JSON lines");
    app->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);
    steps = app->add_option("--steps", cfg.steps)->check(CLI::PositiveNumber);
    lr = app->add_option("--lr", cfg.learning_rate)->check(CLI::PositiveNumber);
    n_ref = app->add_option("--n-ref", cfg.n_ref)->check(CLI::PositiveNumber);
    n_d = app->add_option("--n-d", cfg.n_d)->check(CLI::PositiveNumber);
    seed = app->add_option("--seed", cfg.seed);
    every = app->add_option("--checkpoint-every", cfg.checkpoint_every)->check(CLI::NonNegativeNumber);
    stop = app->add_option("--stop-after", cfg.stop_after)->check(CLI::NonNegativeNumber);
    app->add_option("--precision", precision, "float or double")->check(CLI::IsMember({"float", "double"}));
  }

  json run() const {
    TrainConfig c = config.empty() ? TrainConfig{} : TrainConfig::from_json(io::read_json(config));
    if (*steps) c.steps = cfg.steps;
    if (*lr) c.learning_rate = cfg.learning_rate;
    if (*n_ref) c.n_ref = cfg.n_ref;
    if (*n_d) c.n_d = cfg.n_d;
    if (*seed) c.seed = cfg.seed;
    if (*every) c.checkpoint_every = cfg.checkpoint_every;
    if (*stop) c.stop_after = cfg.stop_after;
    if (!precision.empty()) c.precision = parse_precision(precision);
    c.validate();

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Dataset> sets;
    for (const auto& d : data) sets.push_back(load_dataset(d));
    std::ofstream trace_file;
    if (!trace.empty()) trace_file = open_trace(trace);
    const TrainResult r = train_feedforward(sets, c, out, resume, trace.empty() ? nullptr : &trace_file);
    json j = {{"checkpoint", out}, {"step", r.optimizer.step}, {"seconds", seconds_since(t0)}};
    if (!r.trace.empty()) j["final_loss"] = r.trace.back().loss;
    return j;
  }
};

struct ExportCmd {
  std::string checkpoint, data, out;
  int identity = 0;
  std::vector<std::string> sources;

  void add(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "trained network")->required()->check(CLI::ExistingFile);
    app->add_option("--data", data, "dataset holding the source frames")->required()->check(CLI::ExistingDirectory);
    app->add_option("--out", out, "avatar file to write")->required();
    app->add_option("--identity", identity)->check(CLI::NonNegativeNumber);
    app->add_option("--source", sources, "source frame as view:frame, repeatable (default: every view of frame 0)");
  }

  json run() const {
    const Dataset ds = load_dataset(data);
    if (identity >= static_cast<int>(ds.identities.size())) throw UsageError("--identity is not in the dataset");
    std::vector<std::pair<int, int>> picks;
    for (const auto& s : sources) {
      const auto colon = s.find(':');
      if (colon == std::string::npos) throw UsageError("--source must be view:frame, got " + s);
      try {
        picks.emplace_back(std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1)));
      } catch (const std::exception&) {
        throw UsageError("--source must be view:frame, got " + s);
      }
    }
    if (picks.empty())
      for (int v = 0; v < ds.config.views; ++v) picks.emplace_back(v, 0);

    const NeuralModel model = load_checkpoint(checkpoint);
    if (static_cast<int>(picks.size()) > model.config.max_views)
      throw UsageError("more sources than the network's max_views (" + std::to_string(model.config.max_views) + ")");
    std::vector<Image> images;
    std::vector<UvCoordMap> uvs;
    for (const auto& [v, f] : picks) {
      if (v < 0 || v >= ds.config.views || f < 0 || f >= ds.config.frames)
        throw UsageError("--source " + std::to_string(v) + ":" + std::to_string(f) + " is not in the dataset");
      const DatasetFrame& fr = ds.frame(identity, v, f);
      images.push_back(load_frame_image(fr));
      uvs.push_back(load_frame_uv(fr));
    }
    const int R = model.config.attr_resolution;
    const UvRasterization rast = rasterize_uv(ds.model, R);
    ForwardPass pass = forward_model(model, images, uvs, rast);
    CanonicalAvatar avatar = assemble(pass.maps, pass.aggregate, bake_skinning(ds.model, rast, ds.identities[identity].shape),
                                      rast, AvatarRig::from_model(ds.model, ds.model_hash));
    export_avatar(avatar, out);
    return {{"avatar", out}, {"M", avatar.size()}, {"sources", picks.size()}};
  }
};

struct RenderCmd {
  std::string avatar, out, theta, reference;
  ViewOptions view;

  void add(CLI::App* app) {
    app->add_option("--avatar", avatar)->required()->check(CLI::ExistingFile);
    app->add_option("--out", out, "PNG to write")->required();
    app->add_option("--theta", theta, "theta JSON, or a dataset frame's meta.json (default: zero)")
        ->check(CLI::ExistingFile);
    app->add_option("--reference", reference, "PNG to report PSNR against")->check(CLI::ExistingFile);
    view.add(app);
  }

  json run() const {
    const CanonicalAvatar a = import_avatar(avatar);
    const PoseExpr th = theta.empty() ? zero_theta(a) : load_theta(theta, a);
    const Image img = render_avatar(a, th, view.camera(), view.bg(), parse_precision(view.precision));
    io::write_png(out, img);
    json j = {{"out", out}, {"width", img.width}, {"height", img.height}};
    if (!reference.empty()) {
      const Image ref = io::read_png(reference);
      if (ref.width != img.width || ref.height != img.height) throw UsageError("--reference size differs from the render");
      j["psnr"] = psnr(img, ref);
    }
    return j;
  }
};

struct AnimateCmd {
  std::string avatar, trajectory, out_dir;
  ViewOptions view;

  void add(CLI::App* app) {
    app->add_option("--avatar", avatar)->required()->check(CLI::ExistingFile);
    app->add_option("--trajectory", trajectory, "one theta JSON object per line")->required()->check(CLI::ExistingFile);
    app->add_option("--out-dir", out_dir, "directory for frame_NNNN.png")->required();
    view.add(app);
  }

  json run() const {
    const CanonicalAvatar a = import_avatar(avatar);
    const Camera<double> cam = view.camera();
    const Eigen::Vector3d bg = view.bg();
    std::ifstream in(trajectory);
    if (!in) throw IoError("cannot read " + trajectory);
    fs::create_directories(out_dir);
    std::string line;
    int n = 0, line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      PoseExpr th;
      try {
        th = pose_from_json(json::parse(line), a.num_shape, a.num_expr(), a.num_joints());
      } catch (const std::exception& e) {
        throw InputError(trajectory + " line " + std::to_string(line_no) + ": " + e.what(), {line_no});
      }
      std::ostringstream name;
      name << "frame_" << std::setw(4) << std::setfill('0') << n++ << ".png";
      io::write_png(fs::path(out_dir) / name.str(), render_avatar(a, th, cam, bg, parse_precision(view.precision)));
    }
    return {{"out_dir", out_dir}, {"frames", n}};
  }
};

struct BenchCmd {
  BenchConfig cfg;
  std::string precision = "float";

  void add(CLI::App* app) {
    app->add_option("--gaussians", cfg.gaussians)->check(CLI::PositiveNumber);
    app->add_option("--size", cfg.size)->check(CLI::PositiveNumber);
    app->add_option("--repeats", cfg.repeats, "tiled renders, best time kept")->check(CLI::PositiveNumber);
    app->add_option("--naive-repeats", cfg.naive_repeats, "0 skips the naive renderer")->check(CLI::NonNegativeNumber);
    app->add_option("--seed", cfg.seed);
    app->add_option("--precision", precision, "float or double")->check(CLI::IsMember({"float", "double"}));
  }

  json run(int threads) const {
    BenchConfig c = cfg;
    c.threads = threads;
    c.single_precision = precision == "float";
    return run_benchmark(c).to_json();
  }
};

struct ServeCmd {
  std::string avatar, host = "127.0.0.1", static_dir;
  int port = 8080;
  ServiceLimits limits;

  void add(CLI::App* app) {
    app->add_option("--avatar", avatar)->required()->check(CLI::ExistingFile);
    app->add_option("--host", host, "bind address");
    app->add_option("--port", port, "0 picks a free port")->check(CLI::Range(0, 65535));
    app->add_option("--static", static_dir, "viewer bundle served under /static")->check(CLI::ExistingDirectory);
    app->add_option("--max-request-bytes", limits.max_request_bytes)->check(CLI::PositiveNumber);
    app->add_option("--max-response-bytes", limits.max_response_bytes)->check(CLI::PositiveNumber);
  }

  int run(std::ostream& out, const ServeHooks& hooks) const {
    const PoseService service(import_avatar(avatar), limits);
    httplib::Server svr;
    auto send = [](httplib::Response& res, const HttpReply& r) {
      res.status = r.status;
      for (const auto& [k, v] : r.headers) res.set_header(k, v);
      res.set_content(r.body, r.content_type);
    };
    svr.Get("/meta", [&](const httplib::Request&, httplib::Response& res) { send(res, service.meta()); });
    svr.Post("/pose", [&](const httplib::Request& req, httplib::Response& res) { send(res, service.pose(req.body)); });
    if (!static_dir.empty()) {
      svr.set_mount_point("/static", static_dir);
      svr.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_redirect("/static/index.html"); });
    }
    // Request bodies above the limit are refused by the transport with 413 before parsing.
    svr.set_payload_max_length(limits.max_request_bytes);
    svr.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      const std::string msg = res.status == 413 ? "request body too large" : "no route for " + req.method + " " + req.path;
      res.set_content(json{{"error", msg}}.dump(), "application/json");
    });

    int bound = port;
    if (port == 0) {
      bound = svr.bind_to_any_port(host);
      if (bound < 0) throw IoError("cannot bind " + host);
    } else if (!svr.bind_to_port(host, port)) {
      throw IoError("cannot bind " + host + ":" + std::to_string(port));
    }
    out << json{{"listening", "http://" + host + ":" + std::to_string(bound)}, {"M", service.avatar().size()}}.dump()
        << std::endl;
    std::thread watcher;
    if (hooks.stop)
      watcher = std::thread([&] {
        while (!hooks.stop->load()) std::this_thread::sleep_for(std::chrono::milliseconds(10));
        svr.stop();
      });
    if (hooks.on_listen) hooks.on_listen(bound);
    const bool ok = svr.listen_after_bind();
    if (watcher.joinable()) watcher.join();
    return ok || (hooks.stop && hooks.stop->load()) ? kExitOk : kExitRuntime;
  }
};

void report_error(std::ostream& err, bool as_json, int code, const std::string& kind, const std::string& message,
                  const std::vector<std::int64_t>& indices = {}) {
  if (as_json) {
    json j = {{"error", {{"code", code}, {"kind", kind}, {"message", message}}}};
    if (!indices.empty()) j["error"]["indices"] = indices;
    err << j.dump() << std::endl;
  } else {
    err << "uika: " << message << std::endl;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const ServeHooks& hooks) {
  const bool json_errors = std::find(args.begin(), args.end(), "--json-errors") != args.end();

  CLI::App app("UV-guided feed-forward Gaussian head avatars", args.empty() ? "uika" : args[0]);
  app.require_subcommand(1);
  bool json_flag = false;
  int threads = 0;
  app.add_flag("--json-errors", json_flag, "report errors as one JSON object on stderr");
  app.add_option("--threads", threads, "OpenMP threads (default: all cores)")->check(CLI::NonNegativeNumber);

  GenDataCmd gen;
  FitCmd fit;
  TrainCmd train;
  ExportCmd exp;
  RenderCmd render_cmd;
  AnimateCmd animate_cmd;
  BenchCmd bench;
  ServeCmd serve;
  CLI::App* c_gen = app.add_subcommand("gen-data", "generate a synthetic multi-view dataset");
  CLI::App* c_fit = app.add_subcommand("fit", "optimize one identity's UV attribute maps");
  CLI::App* c_train = app.add_subcommand("train", "train the feed-forward network");
  CLI::App* c_exp = app.add_subcommand("export", "reconstruct an avatar with a trained network");
  CLI::App* c_render = app.add_subcommand("render", "render an avatar to PNG");
  CLI::App* c_anim = app.add_subcommand("animate", "render a theta trajectory");
  CLI::App* c_bench = app.add_subcommand("bench", "time the tiled and naive renderers");
  CLI::App* c_serve = app.add_subcommand("serve", "serve /meta, /pose and /static over HTTP");
  gen.add(c_gen);
  fit.add(c_fit);
  train.add(c_train);
  exp.add(c_exp);
  render_cmd.add(c_render);
  animate_cmd.add(c_anim);
  bench.add(c_bench);
  serve.add(c_serve);
  for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const CLI::App* failed = &app;
    for (CLI::App* sub : app.get_subcommands()) failed = sub;
    report_error(err, json_errors, kExitUsage, "usage", e.what());
    if (!json_errors)
      err << "run '" << (args.empty() ? "uika" : args[0]) << (failed == &app ? "" : " " + failed->get_name())
          << " --help' for usage" << std::endl;
    return kExitUsage;
  }

  const int saved_threads = omp_get_max_threads();
  if (threads > 0) omp_set_num_threads(threads);
  int code = kExitOk;
  try {
    json summary;
    if (*c_gen) summary = gen.run();
    else if (*c_fit) summary = fit.run(out);
    else if (*c_train) summary = train.run();
    else if (*c_exp) summary = exp.run();
    else if (*c_render) summary = render_cmd.run();
    else if (*c_anim) summary = animate_cmd.run();
    else if (*c_bench) summary = bench.run(threads);
    else if (*c_serve) code = serve.run(out, hooks);
    if (!summary.is_null()) out << summary.dump() << std::endl;
  } catch (const UsageError& e) {
    report_error(err, json_errors, kExitUsage, "usage", e.what());
    code = kExitUsage;
  } catch (const InputError& e) {
    report_error(err, json_errors, kExitRuntime, "input", e.what(), e.indices());
    code = kExitRuntime;
  } catch (const ParameterError& e) {
    report_error(err, json_errors, kExitRuntime, "parameter", e.what());
    code = kExitRuntime;
  } catch (const FormatError& e) {
    report_error(err, json_errors, kExitRuntime, "format", e.what());
    code = kExitRuntime;
  } catch (const IoError& e) {
    report_error(err, json_errors, kExitRuntime, "io", e.what());
    code = kExitRuntime;
  } catch (const std::exception& e) {
    report_error(err, json_errors, kExitRuntime, "runtime", e.what());
    code = kExitRuntime;
  }
  omp_set_num_threads(saved_threads);
  return code;
}

}  // namespace uika::cli
