#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "dualnet/tensor.hpp"

namespace dualnet {

/// Adjoint rule of one recorded primitive.  `grad_in[i]` is null when input
/// i does not require a gradient; otherwise the rule accumulates into it.
using BackwardRule = std::function<void(std::span<const double> grad_out,
                                        std::span<std::vector<double>*> grad_in)>;

/// Ordered record of primitive applications for reverse-mode
/// differentiation.  A tape is single-owner and may be replayed once.
class Tape {
 public:
  struct Entry {
    std::vector<std::shared_ptr<const TensorNode>> inputs;
    std::shared_ptr<const TensorNode> output;
    BackwardRule rule;
  };

  /// RAII guard that makes the tape current for the calling thread.
  class Recording {
   public:
    explicit Recording(Tape& tape);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Recording record() { return Recording(*this); }
  static Tape* active();

  void push(Entry entry);
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool consumed() const { return consumed_; }

 private:
  friend std::map<std::uint64_t, Tensor> backward(Tape&, const Tensor&, const Tensor&);
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// Leaf gradients keyed by tensor id.
using GradientMap = std::map<std::uint64_t, Tensor>;

/// Reverse sweep from `root` seeded with `seed` (same shape as root).
/// Throws on an empty tape or a second call on the same tape.
GradientMap backward(Tape& tape, const Tensor& root, const Tensor& seed);

/// Convenience: seed 1 on a scalar root.
GradientMap backward(Tape& tape, const Tensor& root);

/// Records which side of every kink the recorded primitives evaluated on.
/// Two evaluations with equal signatures lie in the same smooth piece.
class KinkSignature {
 public:
  class Scope {
   public:
    explicit Scope(KinkSignature& sig);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    KinkSignature* previous_;
  };

  static void note(std::uint64_t branch);
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

struct GradcheckOptions {
  double step = 1e-5;
  /// Coordinates whose smooth piece changes within this distance are skipped.
  double kink_radius = 1e-3;
};

struct GradcheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.  `f` receives the parameter list and must return a scalar
/// tensor built from primitives.  Error per coordinate is
/// |analytic - numeric| / max(1, |analytic|).
GradcheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          const std::vector<Tensor>& point,
                          const GradcheckOptions& options = {});

}  // namespace dualnet
