#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "pgssl/tensor.hpp"

namespace pgssl {

// Reverse-mode tape. Ops append one backward rule each as they execute, so
// the recorded order is already topological; backward() replays the rules
// once, in reverse. Gradients accumulate additively, which handles fan-out.
//
// A null Tape* passed to an op means "no autodiff": the op computes values
// only and the output does not track gradients. Teacher forward passes and
// evaluation run that way.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void()>;

    void record(BackwardFn fn) { ops_.emplace_back(std::move(fn)); }

    std::size_t size() const { return ops_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays every recorded rule in reverse.
    // Each rule adds into its inputs' grad buffers, so parameters reachable
    // through several paths accumulate correctly and untouched parameters
    // keep whatever the caller zeroed them to.
    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw ValueError("backward: loss does not track gradients");
        loss.grad()[0] += T{1};
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    void clear() { ops_.clear(); }

private:
    std::vector<BackwardFn> ops_;
};

// True when an op invoked with this tape should record gradients for an
// output influenced by `any_input_grad`.
template <typename T>
inline bool tracking(const Tape<T>* tape, bool any_input_grad) {
    return tape != nullptr && any_input_grad;
}

}  // namespace pgssl
