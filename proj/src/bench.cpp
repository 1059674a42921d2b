#include "llamba/bench.hpp"

#include <sys/resource.h>

#include <chrono>
#include <fstream>
#include <random>
#include <sstream>

namespace llamba {

std::size_t student_state_bytes(const Model& m) {
  ModelState s = init_model_state(m);
  return s.byte_size();
}

std::size_t kv_bytes_analytic(const Teacher& t, long position) {
  return 2ull * t.blocks.size() * t.kv_heads() * t.attn_head_dim() * position *
         dtype_size(t.embed.dtype());
}

std::size_t peak_rss_bytes() {
  rusage ru{};
  getrusage(RUSAGE_SELF, &ru);
  return static_cast<std::size_t>(ru.ru_maxrss) * 1024;
}

namespace {

using Clock = std::chrono::steady_clock;

double tok_per_sec(long tokens, Clock::time_point t0, Clock::time_point t1) {
  double secs = std::chrono::duration<double>(t1 - t0).count();
  return tokens / std::max(secs, 1e-9);
}

}  // namespace

BenchReport bench_student(const Model& m, const BenchOptions& opt) {
  BenchReport rep;
  rep.model_kind = "recurrent";
  std::mt19937_64 rng(opt.seed);
  std::size_t per_lane = student_state_bytes(m);
  for (long ctx : opt.contexts) {
    for (int batch : opt.batches) {
      BenchCell cell;
      cell.context = ctx;
      cell.batch = batch;
      cell.analytic_bytes = per_lane * batch;
      if (opt.mem_budget > 0 && cell.analytic_bytes > opt.mem_budget) {
        cell.oom = true;
        rep.cells.push_back(cell);
        continue;
      }
      std::vector<ModelState> lanes;
      lanes.reserve(batch);
      for (int b = 0; b < batch; ++b) lanes.push_back(init_model_state(m));
      // Warm the conv rings, then jump the position counter: decode cost and
      // state size are position-independent, which is the point being measured.
      for (auto& lane : lanes) {
        for (int i = 0; i < 4; ++i)
          decode(m, lane, static_cast<int>(rng() % m.cfg.vocab));
        for (auto& blk : lane.blocks) blk.position = ctx - opt.measure_tokens;
      }
      long done = 0;
      auto t0 = Clock::now();
      for (int i = 0; i < opt.measure_tokens; ++i) {
        int tok = static_cast<int>(rng() % m.cfg.vocab);
        for (auto& lane : lanes) {
          decode(m, lane, tok);
          ++done;
        }
      }
      auto t1 = Clock::now();
      cell.tokens_per_sec = tok_per_sec(done, t0, t1);
      cell.state_bytes = 0;
      for (const auto& lane : lanes) cell.state_bytes += lane.byte_size();
      cell.rss_bytes = peak_rss_bytes();
      rep.cells.push_back(cell);
    }
  }
  return rep;
}

BenchReport bench_teacher(const Teacher& t, const BenchOptions& opt) {
  BenchReport rep;
  rep.model_kind = "attention-toy";
  std::mt19937_64 rng(opt.seed);
  std::size_t hd = t.attn_head_dim();
  for (long ctx : opt.contexts) {
    for (int batch : opt.batches) {
      BenchCell cell;
      cell.context = ctx;
      cell.batch = batch;
      cell.analytic_bytes = kv_bytes_analytic(t, ctx) * batch;
      if (opt.mem_budget > 0 && cell.analytic_bytes > opt.mem_budget) {
        cell.oom = true;
        rep.cells.push_back(cell);
        continue;
      }
      std::vector<KVCache> lanes;
      lanes.reserve(batch);
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (int b = 0; b < batch; ++b) {
        KVCache c = init_kv_cache(t);
        // Pre-fill the cache to the measurement position; decode cost at
        // position p only depends on cache length, not its history.
        long prefill = ctx - opt.measure_tokens;
        for (auto& layer : c.K)
          for (auto& head : layer) {
            head.resize(prefill * hd);
            for (auto& x : head) x = gauss(rng) * 0.1;
          }
        for (auto& layer : c.V)
          for (auto& head : layer) {
            head.resize(prefill * hd);
            for (auto& x : head) x = gauss(rng) * 0.1;
          }
        c.position = prefill;
        lanes.push_back(std::move(c));
      }
      long done = 0;
      auto t0 = Clock::now();
      for (int i = 0; i < opt.measure_tokens; ++i) {
        int tok = static_cast<int>(rng() % t.cfg.vocab);
        for (auto& lane : lanes) {
          teacher_decode(t, lane, tok);
          ++done;
        }
      }
      auto t1 = Clock::now();
      cell.tokens_per_sec = tok_per_sec(done, t0, t1);
      cell.state_bytes = 0;
      for (const auto& lane : lanes) cell.state_bytes += lane.byte_size();
      cell.rss_bytes = peak_rss_bytes();
      rep.cells.push_back(cell);
    }
  }
  return rep;
}

std::string render_bench_csv(const std::vector<BenchReport>& reports) {
  std::ostringstream out;
  out << "model,context,batch,tokens_per_sec,state_bytes,analytic_bytes,rss_bytes\n";
  for (const auto& rep : reports)
    for (const auto& c : rep.cells) {
      out << rep.model_kind << "," << c.context << "," << c.batch << ",";
      if (c.oom)
        out << "OOM,OOM," << c.analytic_bytes << ",0\n";
      else
        out << c.tokens_per_sec << "," << c.state_bytes << "," << c.analytic_bytes << ","
            << c.rss_bytes << "\n";
    }
  return out.str();
}

void write_bench_csv(const std::vector<BenchReport>& reports, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open report file: " + path);
  out << render_bench_csv(reports);
}

}  // namespace llamba
