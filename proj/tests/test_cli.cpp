#include "cli.hpp"

#include "uika/fitting.hpp"
#include "uika/io.hpp"
#include "uika/service.hpp"

#include "test_util.hpp"

#include "httplib.h"

#include <gtest/gtest.h>

#include <fstream>
#include <future>
#include <sstream>
#include <thread>

namespace uika {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
  int code = -1;
  std::string out, err;
  json summary() const { return json::parse(out); }
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "uika");
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run(args, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

/// Shared workspace: the 2-identity micro dataset and one fitted avatar.
struct Workspace {
  fs::path dir = test::scratch_dir("cli");
  fs::path data = dir / "data";
  fs::path avatar = dir / "avatar.uikaav";
  fs::path trace = dir / "fit.jsonl";
  Outcome gen, fit;

  Workspace() {
    gen = run({"gen-data", "--out", data.string(), "--identities", "2", "--views", "4", "--frames", "3", "--width", "32",
               "--height", "32", "--supersample", "2"});
    fit = run({"--threads", "1", "fit", "--data", data.string(), "--out", avatar.string(), "--iterations", "60",
               "--n-ref", "4", "--n-d", "2", "--attr-resolution", "32", "--views", "0,1,2", "--trace", trace.string()});
  }
};

const Workspace& ws() {
  static const Workspace w;
  return w;
}

// ---------------------------------------------------------------------------
// Usage and errors

TEST(CliUsage, UnknownFlagAndMissingSubcommandExitTwo) {
  EXPECT_EQ(run({"bench", "--bogus"}).code, cli::kExitUsage);
  EXPECT_EQ(run({}).code, cli::kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"fit", "--out", "x"}).code, cli::kExitUsage);  // --data missing
  EXPECT_EQ(run({"bench", "--gaussians", "-5"}).code, cli::kExitUsage);
  const Outcome help = run({"--help"});
  EXPECT_EQ(help.code, cli::kExitOk);
  for (const char* cmd : {"gen-data", "fit", "train", "render", "animate", "export", "bench", "serve"})
    EXPECT_NE(help.out.find(cmd), std::string::npos) << cmd;
}

TEST(CliUsage, JsonErrorsAreMachineReadable) {
  const Outcome usage = run({"--json-errors", "bench", "--bogus"});
  EXPECT_EQ(usage.code, cli::kExitUsage);
  const json u = json::parse(usage.err);
  EXPECT_EQ(u.at("error").at("code").get<int>(), 2);
  EXPECT_EQ(u.at("error").at("kind").get<std::string>(), "usage");

  const fs::path empty = test::scratch_dir("cli_empty");
  const Outcome runtime = run({"--json-errors", "fit", "--data", empty.string(), "--out", (empty / "a").string()});
  EXPECT_EQ(runtime.code, cli::kExitRuntime);
  const json r = json::parse(runtime.err);
  EXPECT_EQ(r.at("error").at("code").get<int>(), 1);
  EXPECT_NE(r.at("error").at("message").get<std::string>().find("manifest.json"), std::string::npos);

  const Outcome plain = run({"fit", "--data", empty.string(), "--out", (empty / "a").string()});
  EXPECT_EQ(plain.code, cli::kExitRuntime);
  EXPECT_EQ(plain.err.rfind("uika: ", 0), 0u) << plain.err;
}

// ---------------------------------------------------------------------------
// Pipeline commands

TEST(CliPipeline, GenDataAndFit) {
  const Workspace& w = ws();
  ASSERT_EQ(w.gen.code, 0) << w.gen.err;
  EXPECT_EQ(w.gen.summary().at("frames").get<int>(), 2 * 4 * 3);
  ASSERT_EQ(w.fit.code, 0) << w.fit.err;
  const json s = w.fit.summary();
  EXPECT_EQ(s.at("iterations").get<int>(), 60);
  EXPECT_TRUE(fs::exists(w.avatar));
  EXPECT_EQ(import_avatar(w.avatar).size(), s.at("M").get<int>());
  std::ifstream trace(w.trace);
  std::string line;
  int n = 0;
  while (std::getline(trace, line)) {
    EXPECT_EQ(json::parse(line).at("step").get<int>(), n);
    ++n;
  }
  EXPECT_EQ(n, 60);
}

TEST(CliPipeline, FitRejectsBadConfigFile) {
  const Workspace& w = ws();
  const fs::path cfg = w.dir / "bad_fit.json";
  io::write_text_atomic(cfg, R"({"iterations": 5, "learnign_rate": 0.1})");
  const Outcome o = run({"fit", "--data", w.data.string(), "--out", (w.dir / "x.uikaav").string(), "--config", cfg.string()});
  EXPECT_EQ(o.code, cli::kExitRuntime);
  EXPECT_NE(o.err.find("learnign_rate"), std::string::npos) << o.err;
}

TEST(CliPipeline, RenderReproducesTrainingViewAtTracePsnr) {
  const Workspace& w = ws();
  ASSERT_EQ(w.fit.code, 0);
  const Dataset ds = load_dataset(w.data);
  // Frames supervised at the last step: compare the command's PSNR with the
  // trace, which was measured one (vanishing) update earlier in double precision.
  std::ifstream trace(w.trace);
  std::string line, last;
  while (std::getline(trace, line)) last = line;
  const json entry = json::parse(last);
  double mean = 0;
  for (int idx : entry.at("frames").get<std::vector<int>>()) {
    const DatasetFrame& f = ds.frames[idx];
    const fs::path out = w.dir / ("render_" + std::to_string(idx) + ".png");
    const Outcome o = run({"render", "--avatar", w.avatar.string(), "--out", out.string(), "--camera", f.meta.string(),
                           "--theta", f.meta.string(), "--reference", f.image.string()});
    ASSERT_EQ(o.code, 0) << o.err;
    EXPECT_TRUE(fs::exists(out));
    mean += o.summary().at("psnr").get<double>() / 2.0;
  }
  EXPECT_NEAR(mean, entry.at("psnr").get<double>(), 0.5);
}

TEST(CliPipeline, RenderRingViewAndFlagConflicts) {
  const Workspace& w = ws();
  const fs::path out = w.dir / "ring.png";
  const Outcome o = run({"render", "--avatar", w.avatar.string(), "--out", out.string(), "--ring-view", "2", "--size",
                         "48", "--background", "1,1,1", "--precision", "float"});
  ASSERT_EQ(o.code, 0) << o.err;
  const Image img = io::read_png(out);
  EXPECT_EQ(img.width, 48);
  EXPECT_EQ(img.at(0, 0, 0), 1.0);
  const Dataset ds = load_dataset(w.data);
  EXPECT_EQ(run({"render", "--avatar", w.avatar.string(), "--out", out.string()}).code, cli::kExitUsage);
  EXPECT_EQ(run({"render", "--avatar", w.avatar.string(), "--out", out.string(), "--ring-view", "1", "--camera",
                 ds.frames[0].meta.string()})
                .code,
            cli::kExitUsage);
}

TEST(CliPipeline, AnimateWritesOneFramePerLine) {
  const Workspace& w = ws();
  const Dataset ds = load_dataset(w.data);
  const fs::path traj = w.dir / "traj.jsonl";
  {
    std::ofstream f(traj);
    for (int i = 0; i < 3; ++i) f << io::read_json(ds.frames[i].meta).at("theta").dump() << "\n";
    f << "\n";
  }
  const fs::path out = w.dir / "anim";
  const Outcome o = run({"animate", "--avatar", w.avatar.string(), "--trajectory", traj.string(), "--out-dir",
                         out.string(), "--ring-view", "0", "--ring-views", "4", "--size", "32"});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(o.summary().at("frames").get<int>(), 3);
  for (const char* name : {"frame_0000.png", "frame_0001.png", "frame_0002.png"}) EXPECT_TRUE(fs::exists(out / name));

  // Matches render of the same pose and camera.
  const fs::path single = w.dir / "anim_single.png";
  ASSERT_EQ(run({"render", "--avatar", w.avatar.string(), "--out", single.string(), "--theta",
                 ds.frames[1].meta.string(), "--ring-view", "0", "--ring-views", "4", "--size", "32"})
                .code,
            0);
  EXPECT_EQ(io::read_file(single), io::read_file(out / "frame_0001.png"));

  {
    std::ofstream f(traj);
    f << "{}\n{\"expression\": [1]}\n";
  }
  const Outcome bad = run({"--json-errors", "animate", "--avatar", w.avatar.string(), "--trajectory", traj.string(),
                           "--out-dir", out.string(), "--ring-view", "0"});
  EXPECT_EQ(bad.code, cli::kExitRuntime);
  const json e = json::parse(bad.err);
  EXPECT_NE(e.at("error").at("message").get<std::string>().find("line 2"), std::string::npos);
  EXPECT_EQ(e.at("error").at("indices"), json::array({2}));
}

TEST(CliPipeline, TrainResumeAndExport) {
  const Workspace& w = ws();
  const fs::path cfg = w.dir / "train.json";
  TrainConfig tc;
  tc.network.dim = 16;
  tc.network.heads = 2;
  tc.network.blocks = 2;
  tc.network.token_grid = 4;
  tc.network.patch = 8;
  tc.network.uv_input_resolution = 32;
  tc.network.uv_patch = 8;
  tc.network.attr_resolution = 32;
  tc.network.decoder_channels = 8;
  tc.network.head_hidden = 16;
  tc.network.max_views = 4;
  tc.steps = 6;
  tc.n_ref = 3;
  tc.n_d = 2;
  tc.learning_rate = 1e-3;
  io::write_text_atomic(cfg, tc.to_json().dump(2));
  const fs::path ckpt = w.dir / "net.uikann";
  const Outcome half = run({"train", "--data", w.data.string(), "--out", ckpt.string(), "--config", cfg.string(),
                            "--stop-after", "3"});
  ASSERT_EQ(half.code, 0) << half.err;
  EXPECT_EQ(half.summary().at("step").get<int>(), 3);
  const fs::path done = w.dir / "net_done.uikann";
  const fs::path trace = w.dir / "train.jsonl";
  const Outcome rest = run({"train", "--data", w.data.string(), "--out", done.string(), "--config", cfg.string(),
                            "--resume", ckpt.string(), "--trace", trace.string()});
  ASSERT_EQ(rest.code, 0) << rest.err;
  EXPECT_EQ(rest.summary().at("step").get<int>(), 6);

  const fs::path avatar = w.dir / "ff.uikaav";
  const Outcome exp = run({"export", "--checkpoint", done.string(), "--data", w.data.string(), "--out", avatar.string(),
                           "--identity", "1", "--source", "0:0", "--source", "3:2"});
  ASSERT_EQ(exp.code, 0) << exp.err;
  EXPECT_EQ(exp.summary().at("sources").get<int>(), 2);
  EXPECT_GT(import_avatar(avatar).size(), 0);

  EXPECT_EQ(run({"export", "--checkpoint", done.string(), "--data", w.data.string(), "--out", avatar.string(),
                 "--source", "0-0"})
                .code,
            cli::kExitUsage);
  EXPECT_EQ(run({"export", "--checkpoint", done.string(), "--data", w.data.string(), "--out", avatar.string(),
                 "--source", "9:0"})
                .code,
            cli::kExitUsage);
}

TEST(CliPipeline, BenchReportsBothRenderers) {
  const Outcome o = run({"--threads", "1", "bench", "--gaussians", "500", "--size", "64", "--repeats", "2"});
  ASSERT_EQ(o.code, 0) << o.err;
  const json j = o.summary();
  for (const char* k : {"tiled_ms", "naive_ms", "speedup", "tiled_fps", "tiled_gaussians_per_sec", "max_abs_diff"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j.at("precision").get<std::string>(), "float");
  EXPECT_LT(j.at("max_abs_diff").get<double>(), 1e-5);
  EXPECT_FALSE(run({"bench", "--gaussians", "100", "--size", "32", "--naive-repeats", "0"}).summary().contains("naive_ms"));
}

// ---------------------------------------------------------------------------
// serve

struct Server {
  std::atomic<bool> stop{false};
  std::promise<int> port;
  std::thread thread;
  std::ostringstream out, err;
  int code = -1;

  explicit Server(std::vector<std::string> args) {
    args.insert(args.begin(), "uika");
    cli::ServeHooks hooks;
    hooks.stop = &stop;
    hooks.on_listen = [this](int p) { port.set_value(p); };
    thread = std::thread([this, args, hooks] { code = cli::run(args, out, err, hooks); });
  }
  ~Server() {
    stop = true;
    thread.join();
  }
};

TEST(CliServe, EndpointsOverHttp) {
  const Workspace& w = ws();
  const fs::path static_dir = w.dir / "static";
  fs::create_directories(static_dir);
  io::write_text_atomic(static_dir / "index.html", "<!doctype html><title>viewer</title>\n");
  Server server({"serve", "--avatar", w.avatar.string(), "--port", "0", "--static", static_dir.string(),
                 "--max-request-bytes", "4096"});
  auto fut = server.port.get_future();
  ASSERT_EQ(fut.wait_for(std::chrono::seconds(10)), std::future_status::ready) << server.err.str();
  httplib::Client client("127.0.0.1", fut.get());
  const CanonicalAvatar avatar = import_avatar(w.avatar);

  const auto meta = client.Get("/meta");
  ASSERT_TRUE(meta);
  EXPECT_EQ(meta->status, 200);
  EXPECT_EQ(json::parse(meta->body).at("M").get<int>(), avatar.size());

  const auto zero = client.Post("/pose", "{}", "application/json");
  ASSERT_TRUE(zero);
  EXPECT_EQ(zero->status, 200);
  EXPECT_EQ(zero->get_header_value("Content-Type"), "application/octet-stream");
  EXPECT_EQ(zero->get_header_value(kSplatCountHeader), std::to_string(avatar.size()));
  const GaussianSet<float> g = decode_splats(zero->body, avatar.size());
  EXPECT_EQ(g.positions, avatar.gaussians.positions.cast<float>());

  const std::string theta = R"({"expression": [0.5, -1, 0, 0, 0, 0, 0, 0, 0, 0.25]})";
  const auto a = client.Post("/pose", theta, "application/json");
  const auto b = client.Post("/pose", theta, "application/json");
  ASSERT_TRUE(a && b);
  EXPECT_EQ(a->body, b->body);
  EXPECT_NE(a->body, zero->body);

  const auto bad = client.Post("/pose", R"({"expression": [1, 2]})", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(json::parse(bad->body).at("field").get<std::string>(), "theta.expression");

  const auto big = client.Post("/pose", std::string(5000, ' '), "application/json");
  ASSERT_TRUE(big);
  EXPECT_EQ(big->status, 413);

  const auto page = client.Get("/static/index.html");
  ASSERT_TRUE(page);
  EXPECT_EQ(page->status, 200);
  EXPECT_NE(page->body.find("viewer"), std::string::npos);
  const auto missing = client.Get("/nothing");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
}

TEST(CliServe, ConcurrentRequestsAgree) {
  const Workspace& w = ws();
  Server server({"serve", "--avatar", w.avatar.string(), "--port", "0"});
  auto fut = server.port.get_future();
  ASSERT_EQ(fut.wait_for(std::chrono::seconds(10)), std::future_status::ready);
  const int port = fut.get();
  const std::string theta = R"({"translation": [0.01, 0, 0]})";
  std::vector<std::string> bodies(6);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < bodies.size(); ++i)
    threads.emplace_back([&, i] {
      httplib::Client c("127.0.0.1", port);
      if (auto r = c.Post("/pose", theta, "application/json")) bodies[i] = r->body;
    });
  for (auto& t : threads) t.join();
  for (const auto& b : bodies) EXPECT_EQ(b, bodies[0]);
  EXPECT_FALSE(bodies[0].empty());
}

TEST(CliServe, MissingAvatarIsUsageError) {
  EXPECT_EQ(run({"serve", "--avatar", "/no/such/file"}).code, cli::kExitUsage);
}

}  // namespace
}  // namespace uika
