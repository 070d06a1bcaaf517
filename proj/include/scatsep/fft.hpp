#pragma once

#include <cstddef>
#include <span>

// Thin wrapper over FFTW. Complex arrays are interleaved (re, im) doubles.
// Plans are cached per (length, kind) and shared across threads; execution
// uses the new-array interface so concurrent calls are safe.
namespace scatsep::fft {

/// Unnormalized forward DFT: out[k] = sum_t in[t] exp(-2 pi i k t / n).
void forward(std::span<const double> in, std::span<double> out, std::size_t n);

/// Normalized inverse DFT (includes the 1/n factor).
void inverse(std::span<const double> in, std::span<double> out, std::size_t n);

/// Unnormalized inverse DFT (adjoint of `forward`), no 1/n factor.
void adjoint(std::span<const double> in, std::span<double> out, std::size_t n);

/// Forward DFT of a real length-n signal into a full length-n complex spectrum.
void forward_real(std::span<const double> in, std::span<double> out);

}  // namespace scatsep::fft
