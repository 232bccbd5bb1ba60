#include "kt/tape.hpp"

#include <algorithm>

#include "kt/error.hpp"

namespace kt {
namespace {
thread_local Tape* g_active = nullptr;
}

Tape* Tape::active() noexcept { return g_active; }

void Tape::record(Node node) { nodes_.push_back(std::move(node)); }

std::size_t Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw DimensionError("backward() needs a scalar loss, got shape " +
                             (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    const auto& target = loss.storage();
    auto it = std::find_if(nodes_.rbegin(), nodes_.rend(),
                           [&](const Node& n) { return n.output == target; });
    if (it == nodes_.rend()) {
        throw Error("backward(): loss was not produced on this tape");
    }
    target->grad.assign(1, 1.0);

    std::size_t visited = 0;
    for (; it != nodes_.rend(); ++it) {
        if (it->output->grad.empty()) continue;  // no path to the loss
        it->backward();
        ++visited;
    }
    return visited;
}

TapeScope::TapeScope(Tape& tape) noexcept : previous_(g_active) { g_active = &tape; }
TapeScope::~TapeScope() { g_active = previous_; }

NoGradScope::NoGradScope() noexcept : previous_(g_active) { g_active = nullptr; }
NoGradScope::~NoGradScope() { g_active = previous_; }

OpRecorder::OpRecorder(const char* op, std::initializer_list<const Tensor*> inputs) : op_(op) {
    if (Tape::active() == nullptr) return;
    for (const Tensor* t : inputs) {
        if (t && t->defined() && t->requires_grad()) recording_ = true;
    }
    if (!recording_) return;
    for (const Tensor* t : inputs) {
        if (t && t->defined()) inputs_.push_back(t->storage());
    }
}

Tensor OpRecorder::output(Shape shape, std::vector<double> values) const {
    check_finite(values, op_);
    return make_tensor(std::move(shape), std::move(values), recording_);
}

void OpRecorder::on_backward(const Tensor& out, std::function<void(const double*)> rule) const {
    if (!recording_) return;
    auto storage = out.storage();
    TensorStorage* raw = storage.get();
    Tape::active()->record(Tape::Node{
        op_, inputs_, std::move(storage),
        [raw, rule = std::move(rule)]() { rule(raw->grad.data()); }});
}

double* grad_target(const Tensor& t) {
    if (!t.defined() || !t.requires_grad()) return nullptr;
    return t.storage()->grad_buffer();
}

}  // namespace kt
