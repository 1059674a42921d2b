#pragma once

#include <string>
#include <vector>

#include "llamba/model.hpp"

namespace llamba {

// One (context, batch) grid cell. `oom` marks cells whose estimated decode
// memory exceeds the configured budget; they carry the "OOM" sentinel in CSV.
struct BenchCell {
  long context = 0;
  int batch = 1;
  double tokens_per_sec = 0.0;
  std::size_t state_bytes = 0;     // exact internal accounting, all lanes
  std::size_t analytic_bytes = 0;  // closed-form prediction for the same cell
  std::size_t rss_bytes = 0;       // OS peak RSS (secondary, allocator-noisy)
  bool oom = false;
};

struct BenchReport {
  std::string model_kind;  // "recurrent" or "attention-toy"
  std::vector<BenchCell> cells;
};

struct BenchOptions {
  std::vector<long> contexts = {64, 256, 1024, 4096};
  std::vector<int> batches = {1, 8, 32};
  int measure_tokens = 32;  // decode steps timed per cell
  std::size_t mem_budget = 0;  // bytes; 0 = unlimited
  std::uint64_t seed = 0;
};

// Analytic decode-state sizes. The student state is independent of t; the
// baseline KV cache is 2 * L * H_kv * head_dim * t * dtype bytes.
std::size_t student_state_bytes(const Model& m);
std::size_t kv_bytes_analytic(const Teacher& t, long position);

BenchReport bench_student(const Model& m, const BenchOptions& opt);
BenchReport bench_teacher(const Teacher& t, const BenchOptions& opt);

std::size_t peak_rss_bytes();

void write_bench_csv(const std::vector<BenchReport>& reports, const std::string& path);
std::string render_bench_csv(const std::vector<BenchReport>& reports);

}  // namespace llamba
