#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rffi/nn/graph.hpp"
#include "rffi/nn/tensor.hpp"

namespace rffi::nn {

// Named parameter tensors plus AdamW moment state, in fixed insertion order.
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor value;
    Tensor m, v;  // first/second moments
  };
  std::vector<Entry> entries;
  std::unordered_map<std::string, int> index;
  int64_t step_count = 0;

  int add(const std::string& name, Tensor init) {
    if (index.count(name)) throw std::invalid_argument("param exists: " + name);
    Entry e;
    e.name = name;
    e.m = Tensor(init.shape);
    e.v = Tensor(init.shape);
    e.value = std::move(init);
    entries.push_back(std::move(e));
    index[name] = static_cast<int>(entries.size()) - 1;
    return index[name];
  }
  Tensor& get(const std::string& name) { return entries[at(name)].value; }
  const Tensor& get(const std::string& name) const { return entries[at(name)].value; }
  bool has(const std::string& name) const { return index.count(name) > 0; }
  size_t size() const { return entries.size(); }

 private:
  size_t at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw std::out_of_range("no such param: " + name);
    return static_cast<size_t>(it->second);
  }
};

// Binds every ParamStore tensor into a graph as a leaf (in entry order) and
// resolves names to node ids while building the forward pass.
struct GraphParams {
  Graph* g = nullptr;
  const ParamStore* ps = nullptr;
  std::vector<NodeId> ids;

  static GraphParams bind(Graph& g, const ParamStore& ps, bool trainable) {
    GraphParams gp;
    gp.g = &g;
    gp.ps = &ps;
    gp.ids.reserve(ps.entries.size());
    for (const auto& e : ps.entries) gp.ids.push_back(g.input(e.value, trainable));
    return gp;
  }
  NodeId operator[](const std::string& name) const {
    auto it = ps->index.find(name);
    if (it == ps->index.end()) throw std::out_of_range("no such param: " + name);
    return ids[static_cast<size_t>(it->second)];
  }
};

// Decoupled-weight-decay Adam. Per-parameter update, independent of order:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta
struct AdamW {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;

  // grads[i] may be null (treated as zero) and must align with ps.entries
  void step(ParamStore& ps, const std::vector<const Tensor*>& grads, float lr) const;
};

// Reads gradients for bound params out of the graph after backward().
std::vector<const Tensor*> collect_grads(const Graph& g, const GraphParams& gp);

enum class Schedule { kConstant, kCosine, kOneCycle };

Schedule schedule_from_string(const std::string& s);
std::string schedule_to_string(Schedule s);

// onecycle: linear warm-up to base_lr peaking at 30% of steps, then cosine
// down to base_lr/25; cosine: 0.5*(1+cos(pi*step/total))*base_lr
double lr_schedule(Schedule kind, int64_t step, int64_t total_steps, double base_lr);

enum class TaskLoss { kCrossEntropy, kFocal };

struct TrainHyper {
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  int batch_size = 64;
  Schedule schedule = Schedule::kOneCycle;
  int early_stop_patience = 5;
  double label_smoothing = 0.05;
  double focal_gamma = 2.0;
  TaskLoss task_loss = TaskLoss::kCrossEntropy;
  int max_epochs = 20;

  void validate() const {
    if (learning_rate <= 0) throw std::invalid_argument("hyper: learning_rate must be > 0");
    if (early_stop_patience < 1) throw std::invalid_argument("hyper: patience must be >= 1");
    if (label_smoothing < 0 || label_smoothing > 0.2)
      throw std::invalid_argument("hyper: label_smoothing must be in [0, 0.2]");
    if (batch_size < 1 || max_epochs < 1) throw std::invalid_argument("hyper: bad batch/epochs");
    if (focal_gamma < 0) throw std::invalid_argument("hyper: focal_gamma must be >= 0");
  }
};

}  // namespace rffi::nn
