// Small deterministic workload for exercising the supervisor.
//
//   clowdr-toy [--mb N] [--burn S] [--threads N] [--sleep S]
//              [--stdout-bytes N] [--stderr TEXT] [--exit N]
//
// Steps run in that order. --burn spins for S wall-clock seconds on each
// of --threads threads.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <algorithm>
#include <cstring>
#include <string>
#include <thread>
#include <vector>

namespace {

void burn(double seconds) {
  const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(seconds);
  volatile unsigned long x = 0;
  while (std::chrono::steady_clock::now() < until)
    for (int i = 0; i < 10000; ++i) x = x + i;
}

}  // namespace

int main(int argc, char** argv) {
  double mb = 0, burn_s = 0, sleep_s = 0;
  long stdout_bytes = 0;
  int threads = 1, code = 0;
  std::string err_text;
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string k = argv[i];
    const char* v = argv[i + 1];
    if (k == "--mb") mb = std::atof(v);
    else if (k == "--burn") burn_s = std::atof(v);
    else if (k == "--threads") threads = std::atoi(v);
    else if (k == "--sleep") sleep_s = std::atof(v);
    else if (k == "--stdout-bytes") stdout_bytes = std::atol(v);
    else if (k == "--stderr") err_text = v;
    else if (k == "--exit") code = std::atoi(v);
    else {
      std::fprintf(stderr, "clowdr-toy: unknown option %s\n", k.c_str());
      return 2;
    }
  }

  std::vector<char> block;
  if (mb > 0) {
    block.resize(static_cast<std::size_t>(mb * 1024 * 1024));
    // Touch every page so it counts toward resident memory.
    for (std::size_t i = 0; i < block.size(); i += 4096) block[i] = static_cast<char>(i);
  }
  if (burn_s > 0) {
    std::vector<std::thread> pool;
    for (int t = 1; t < threads; ++t) pool.emplace_back(burn, burn_s);
    burn(burn_s);
    for (auto& t : pool) t.join();
  }
  if (sleep_s > 0) std::this_thread::sleep_for(std::chrono::duration<double>(sleep_s));
  if (stdout_bytes > 0) {
    // Line-structured so truncation is easy to spot.
    std::string line(63, 'x');
    line += '\n';
    long left = stdout_bytes;
    while (left > 0) {
      const long n = std::min<long>(left, static_cast<long>(line.size()));
      std::fwrite(line.data(), 1, static_cast<std::size_t>(n), stdout);
      left -= n;
    }
  }
  if (!err_text.empty()) std::fprintf(stderr, "%s\n", err_text.c_str());
  std::fflush(nullptr);
  return code;
}
