#include "t3/runtime.hpp"

#include <Eigen/Core>
#include <atomic>
#include <cstdlib>
#include <cstring>
#include <thread>

namespace t3 {

namespace {

int read_env_flag() {
  const char* v = std::getenv("T3_DETERMINISTIC");
  return (v != nullptr && std::strcmp(v, "1") == 0) ? 1 : 0;
}

std::atomic<int> g_deterministic{-1};

}  // namespace

bool deterministic_mode() {
  int v = g_deterministic.load();
  if (v < 0) {
    v = read_env_flag();
    g_deterministic.store(v);
    if (v) Eigen::setNbThreads(1);
  }
  return v == 1;
}

void set_deterministic(bool on) {
  g_deterministic.store(on ? 1 : 0);
  if (on) Eigen::setNbThreads(1);
}

int worker_threads() {
  if (deterministic_mode()) return 1;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace t3
