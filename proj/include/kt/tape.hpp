#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "kt/tensor.hpp"

namespace kt {

/// Ordered record of differentiable operations for reverse-mode autodiff.
///
/// Operations record themselves on the tape that is active on the calling
/// thread (see TapeScope). With no active tape, operations run without
/// recording, which is the inference path. Nodes are appended in execution
/// order, so walking the list backwards is a valid reverse topological order.
class Tape {
public:
    struct Node {
        const char* op;
        std::vector<std::shared_ptr<TensorStorage>> inputs;
        std::shared_ptr<TensorStorage> output;
        // Reads output->grad and accumulates into the inputs' grad buffers.
        std::function<void()> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(Node node);

    // Seeds d(loss)/d(loss) = 1 and runs every node's backward rule once, in
    // reverse order. Returns the number of nodes visited. Throws when `loss`
    // is not a scalar or was not produced on this tape.
    std::size_t backward(const Tensor& loss);

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    void clear() noexcept { nodes_.clear(); }

    // Tape currently receiving operations on this thread, or nullptr.
    static Tape* active() noexcept;

private:
    friend class TapeScope;
    std::vector<Node> nodes_;
};

// Makes `tape` the active tape for the current thread until destruction.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) noexcept;
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

// Suspends recording for the current thread (frozen-parameter inference).
class NoGradScope {
public:
    NoGradScope() noexcept;
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

// Helper for op implementations: creates the output tensor and, when any input
// requires grad and a tape is active, records `backward` against it.
// `backward` receives the output gradient buffer.
class OpRecorder {
public:
    OpRecorder(const char* op, std::initializer_list<const Tensor*> inputs);

    // True when the op's result participates in differentiation.
    bool recording() const noexcept { return recording_; }

    Tensor output(Shape shape, std::vector<double> values) const;

    // Registers the backward rule. Must be called after output().
    void on_backward(const Tensor& out, std::function<void(const double* grad_out)> rule) const;

private:
    const char* op_;
    std::vector<std::shared_ptr<TensorStorage>> inputs_;
    bool recording_ = false;
};

// Gradient buffer of `t` if it takes part in differentiation, else nullptr.
double* grad_target(const Tensor& t);

}  // namespace kt
