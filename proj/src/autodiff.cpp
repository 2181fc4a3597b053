#include "dualnet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

#include "dualnet/ops.hpp"

namespace dualnet {

namespace {
thread_local Tape* current_tape = nullptr;
thread_local KinkSignature* current_signature = nullptr;
}  // namespace

Tape::Recording::Recording(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
Tape::Recording::~Recording() { current_tape = previous_; }

Tape* Tape::active() { return current_tape; }

void Tape::push(Entry entry) {
  if (consumed_) throw std::logic_error("tape already replayed; record a new tape");
  entries_.push_back(std::move(entry));
}

GradientMap backward(Tape& tape, const Tensor& root, const Tensor& seed) {
  if (tape.empty()) throw std::logic_error("backward on an empty tape");
  if (tape.consumed_) throw std::logic_error("backward called twice on the same tape");
  if (root.shape() != seed.shape()) {
    throw ShapeError("seed shape " + to_string(seed.shape()) + " does not match root " +
                     to_string(root.shape()));
  }
  tape.consumed_ = true;

  std::unordered_map<const TensorNode*, std::vector<double>> grads;
  std::set<const TensorNode*> produced;
  for (const auto& e : tape.entries_) produced.insert(e.output.get());

  grads[root.node().get()] = seed.values();

  std::vector<std::vector<double>*> slots;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    auto g = grads.find(it->output.get());
    if (g == grads.end()) continue;
    // Move out so the slot can be released once consumed.
    std::vector<double> grad_out = std::move(g->second);
    grads.erase(g);
    slots.assign(it->inputs.size(), nullptr);
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      const auto* in = it->inputs[i].get();
      if (!in->requires_grad) continue;
      auto& slot = grads[in];
      if (slot.empty()) slot.assign(in->data.size(), 0.0);
      slots[i] = &slot;
    }
    it->rule(grad_out, slots);
  }

  GradientMap out;
  for (auto& [node, g] : grads) {
    if (produced.count(node) || !node->requires_grad) continue;
    for (double v : g) {
      if (!std::isfinite(v)) throw NumericError("non-finite gradient");
    }
    out.emplace(node->id, Tensor(node->shape, std::move(g)));
  }
  // Drop the recorded closures; the tape cannot be replayed.
  tape.entries_.clear();
  tape.entries_.shrink_to_fit();
  return out;
}

GradientMap backward(Tape& tape, const Tensor& root) {
  return backward(tape, root, Tensor::full(root.shape(), 1.0));
}

KinkSignature::Scope::Scope(KinkSignature& sig) : previous_(current_signature) {
  current_signature = &sig;
}
KinkSignature::Scope::~Scope() { current_signature = previous_; }

void KinkSignature::note(std::uint64_t branch) {
  if (!current_signature) return;
  // FNV-1a over the branch stream.
  auto& h = current_signature->hash_;
  for (int i = 0; i < 8; ++i) {
    h ^= (branch >> (8 * i)) & 0xffu;
    h *= 0x100000001b3ULL;
  }
}

GradcheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          const std::vector<Tensor>& point, const GradcheckOptions& options) {
  std::vector<Tensor> params;
  params.reserve(point.size());
  for (const auto& p : point) params.push_back(p.as_parameter());

  Tape tape;
  Tensor root;
  {
    auto rec = tape.record();
    root = f(params);
  }
  if (root.size() != 1) throw ShapeError("gradcheck needs a scalar function");
  GradientMap grads = tape.empty() ? GradientMap{} : backward(tape, root);

  auto evaluate = [&](const std::vector<Tensor>& at, std::uint64_t* signature) {
    KinkSignature sig;
    KinkSignature::Scope scope(sig);
    double v = f(at).item();
    if (!std::isfinite(v)) throw NumericError("gradcheck probe produced a non-finite value");
    if (signature) *signature = sig.value();
    return v;
  };

  std::vector<Tensor> probe;
  for (const auto& p : point) probe.push_back(p.detach());
  std::uint64_t base_sig = 0;
  evaluate(probe, &base_sig);

  GradcheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto it = grads.find(params[t].id());
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      auto shifted = [&](double delta) {
        std::vector<double> v = point[t].values();
        v[i] += delta;
        auto copy = probe;
        copy[t] = Tensor(point[t].shape(), std::move(v));
        return copy;
      };
      std::uint64_t sp = 0, sm = 0;
      evaluate(shifted(options.kink_radius), &sp);
      evaluate(shifted(-options.kink_radius), &sm);
      if (sp != base_sig || sm != base_sig) {
        ++result.skipped;
        continue;
      }
      double fp = evaluate(shifted(options.step), nullptr);
      double fm = evaluate(shifted(-options.step), nullptr);
      double numeric = (fp - fm) / (2.0 * options.step);
      double analytic = it == grads.end() ? 0.0 : it->second[i];
      double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      result.max_rel_err = std::max(result.max_rel_err, err);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace dualnet
