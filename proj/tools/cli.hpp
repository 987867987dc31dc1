#pragma once

#include <atomic>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace uika::cli {

/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Hooks for running `serve` in-process (tests). `on_listen` receives the
/// bound port; setting `stop` to true shuts the server down.
struct ServeHooks {
  std::function<void(int port)> on_listen;
  std::atomic<bool>* stop = nullptr;
};

/// Runs one command line (argv[0] is the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const ServeHooks& hooks = {});

}  // namespace uika::cli
