#include "scatsep/fft.hpp"

#include <fftw3.h>

#include <cstring>
#include <map>
#include <mutex>
#include <tuple>
#include <vector>

#include "scatsep/errors.hpp"

namespace scatsep::fft {
namespace {

enum class PlanKind { Forward, Backward, RealForward };

class PlanCache {
 public:
  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

  fftw_plan get(std::size_t n, PlanKind kind) {
    std::lock_guard lock(mutex_);
    auto key = std::make_pair(n, kind);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    const int len = static_cast<int>(n);
    fftw_plan plan = nullptr;
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    if (kind == PlanKind::RealForward) {
      std::vector<double> in(n);
      std::vector<fftw_complex> out(n / 2 + 1);
      plan = fftw_plan_dft_r2c_1d(len, in.data(), out.data(), flags);
    } else {
      std::vector<fftw_complex> in(n), out(n);
      plan = fftw_plan_dft_1d(len, in.data(), out.data(),
                              kind == PlanKind::Forward ? FFTW_FORWARD : FFTW_BACKWARD, flags);
    }
    if (plan == nullptr) throw SizingError("FFTW could not plan a transform of length " + std::to_string(n));
    plans_.emplace(key, plan);
    return plan;
  }

 private:
  std::mutex mutex_;
  std::map<std::pair<std::size_t, PlanKind>, fftw_plan> plans_;
};

PlanCache& cache() {
  static PlanCache instance;
  return instance;
}

void check_complex(std::span<const double> in, std::span<double> out, std::size_t n) {
  if (in.size() != 2 * n || out.size() != 2 * n)
    throw SizingError("complex DFT buffers must hold 2*n doubles");
}

void run_complex(std::span<const double> in, std::span<double> out, std::size_t n, PlanKind kind) {
  check_complex(in, out, n);
  fftw_plan plan = cache().get(n, kind);
  if (in.data() == out.data()) {
    std::vector<double> tmp(in.begin(), in.end());
    fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(tmp.data()),
                     reinterpret_cast<fftw_complex*>(out.data()));
  } else {
    // FFTW does not modify the input of an out-of-place complex transform.
    fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(const_cast<double*>(in.data())),
                     reinterpret_cast<fftw_complex*>(out.data()));
  }
}

}  // namespace

void forward(std::span<const double> in, std::span<double> out, std::size_t n) {
  run_complex(in, out, n, PlanKind::Forward);
}

void adjoint(std::span<const double> in, std::span<double> out, std::size_t n) {
  run_complex(in, out, n, PlanKind::Backward);
}

void inverse(std::span<const double> in, std::span<double> out, std::size_t n) {
  run_complex(in, out, n, PlanKind::Backward);
  const double scale = 1.0 / static_cast<double>(n);
  for (double& v : out) v *= scale;
}

void forward_real(std::span<const double> in, std::span<double> out) {
  const std::size_t n = in.size();
  if (out.size() != 2 * n) throw SizingError("real DFT output must hold 2*n doubles");
  if (n == 0) return;
  fftw_plan plan = cache().get(n, PlanKind::RealForward);
  std::vector<double> src(in.begin(), in.end());
  // r2c writes the first n/2+1 bins; the rest follow from Hermitian symmetry.
  fftw_execute_dft_r2c(plan, src.data(), reinterpret_cast<fftw_complex*>(out.data()));
  for (std::size_t k = n / 2 + 1; k < n; ++k) {
    out[2 * k] = out[2 * (n - k)];
    out[2 * k + 1] = -out[2 * (n - k) + 1];
  }
}

}  // namespace scatsep::fft
