// Compares the serial reference kernels against their OpenMP versions and
// times one end-to-end perturbation.
#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "ntk/kernels.hpp"
#include "ntk/perturb.hpp"
#include "ntk/rng.hpp"
#include "ntk/tensorstore.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warmup
  const auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = Clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_ms, double parallel_ms, bool identical) {
  std::printf("%-22s serial %8.3f ms   omp %8.3f ms   speedup %5.2fx   bitwise %s\n", name,
              serial_ms, parallel_ms, serial_ms / parallel_ms, identical ? "equal" : "DIFFER");
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("openmp threads: %d\n", omp_get_max_threads());
#else
  std::printf("built without openmp; parallel kernels run serially\n");
#endif

  ntk::Rng rng(7, "bench");
  const std::int64_t m = 384, k = 384, n = 384;
  std::vector<double> a(static_cast<std::size_t>(m * k)), b(static_cast<std::size_t>(k * n));
  for (auto& x : a) x = rng.normal();
  for (auto& x : b) x = rng.normal();
  std::vector<double> c1(static_cast<std::size_t>(m * n)), c2(c1.size());

  report("matmul 384^3",
         time_ms([&] { ntk::kernels::matmul_serial(a.data(), b.data(), c1.data(), m, k, n); }, 3),
         time_ms([&] { ntk::kernels::matmul(a.data(), b.data(), c2.data(), m, k, n); }, 3),
         c1 == c2);

  report("matmul_tn 384^3",
         time_ms([&] { ntk::kernels::matmul_tn_serial(a.data(), b.data(), c1.data(), m, k, n); }, 3),
         time_ms([&] { ntk::kernels::matmul_tn(a.data(), b.data(), c2.data(), m, k, n); }, 3),
         c1 == c2);

  report("matmul_nt 384^3",
         time_ms([&] { ntk::kernels::matmul_nt_serial(a.data(), b.data(), c1.data(), m, n, k); }, 3),
         time_ms([&] { ntk::kernels::matmul_nt(a.data(), b.data(), c2.data(), m, n, k); }, 3),
         c1 == c2);

  std::vector<double> big(8'000'000);
  for (auto& x : big) x = rng.normal();
  double s1 = 0.0, s2 = 0.0;
  report("sum 8e6",
         time_ms([&] { s1 = ntk::kernels::sum_serial(big); }, 5),
         time_ms([&] { s2 = ntk::kernels::sum(big); }, 5), s1 == s2);
  report("sum_sq_dev 8e6",
         time_ms([&] { s1 = ntk::kernels::sum_sq_dev_serial(big, 0.5); }, 5),
         time_ms([&] { s2 = ntk::kernels::sum_sq_dev(big, 0.5); }, 5), s1 == s2);

  // end-to-end: one 16-tensor checkpoint, 4M elements total
  ntk::Checkpoint ckpt;
  for (int t = 0; t < 16; ++t) {
    ntk::NamedTensor nt;
    nt.name = "w" + std::to_string(t);
    nt.shape = {500, 500};
    nt.data.resize(250'000);
    for (auto& x : nt.data) x = static_cast<float>(rng.normal());
    ckpt.add(std::move(nt));
  }
  ntk::NoiseSpec spec;
  spec.lambda = 0.15;
  spec.seed = 42;
  const double perturb_ms =
      time_ms([&] { (void)ntk::perturb_checkpoint(ckpt, spec); }, 3);
  std::printf("%-22s %8.3f ms (parallel over tensors)\n", "perturb 4e6 elems", perturb_ms);
  return 0;
}
