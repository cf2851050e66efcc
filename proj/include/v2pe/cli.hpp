#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace v2pe {

// Entry point of the `v2pe` tool. Returns the process exit status.
int run_cli(int argc, char** argv);

// Keeps freed activation buffers in the heap instead of returning them to
// the kernel after every step (glibc only; a no-op elsewhere).
void tune_allocator();

// Worker count for suite scoring, from V2PE_WORKERS (default 1).
std::size_t workers_from_env();

struct SelfTestResult {
  std::string name;
  bool ok = false;
  std::string detail;
};

// Fast invariant checks over every module; used by `v2pe selftest`.
std::vector<SelfTestResult> run_selftest(std::uint64_t seed);

}  // namespace v2pe
