#include "lobeseg/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace lobeseg {

namespace {
thread_local bool g_grad_enabled = true;
int g_num_threads = 0;  // 0 = uninitialized, resolve lazily
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

int num_threads() {
  if (g_num_threads <= 0) {
    unsigned hw = std::thread::hardware_concurrency();
    g_num_threads = hw == 0 ? 1 : static_cast<int>(hw);
  }
  return g_num_threads;
}

void set_num_threads(int n) { g_num_threads = n < 1 ? 1 : n; }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body,
                  std::int64_t grain) {
  if (n <= 0) return;
  int workers = num_threads();
  std::int64_t max_by_grain = (n + grain - 1) / grain;
  if (workers > max_by_grain) workers = static_cast<int>(max_by_grain);
  if (workers <= 1) {
    body(0, n);
    return;
  }
  std::int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    std::int64_t lo = w * chunk;
    std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw ContractError("backward on undefined tensor");
  if (loss.numel() != 1)
    throw ContractError(
        concat("backward requires a scalar loss, got shape ", shape_str(loss.shape())));
  if (!loss.requires_grad())
    throw ContractError("backward on a tensor that does not require gradients");

  // Iterative post-order DFS; inputs are visited in recorded order so
  // accumulation order is deterministic.
  std::vector<TapeNode<T>*> order;
  std::unordered_set<TapeNode<T>*> seen;
  struct Frame {
    TapeNode<T>* node;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_input < f.node->inputs.size()) {
      TapeNode<T>* in = f.node->inputs[f.next_input++].get();
      if (in->requires_grad && seen.insert(in).second) stack.push_back({in, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] = T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TapeNode<T>* node = *it;
    if (!node->backward_fn) continue;
    node->ensure_grad();
    node->backward_fn(*node);
  }

  // Release the recorded graph; leaf gradients stay behind.
  for (TapeNode<T>* node : order) {
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->inputs.clear();
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

template struct TapeNode<float>;
template struct TapeNode<double>;
template class Tensor<float>;
template class Tensor<double>;

}  // namespace lobeseg
