#include "rffi/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace rffi::clf {

using nn::Graph;
using nn::GraphParams;
using nn::NodeId;
using nn::ParamStore;
using nn::Tensor;
using json = nlohmann::json;

namespace {
constexpr int kNormGroups = 8;
}

ArchPreset arch_preset(const std::string& name) {
  ArchPreset p;
  p.name = name;
  if (name == "shallow_cnn") {
    p.stem_width = 32;
    p.stage_widths = {64, 64};
    p.stage_blocks = {1, 1};
    p.feature_dim = 64;
    p.residual = false;
  } else if (name == "mini_resnet") {
    p.stem_width = 16;
    p.stage_widths = {16, 32, 64};
    p.stage_blocks = {1, 1, 1};
    p.feature_dim = 64;
  } else if (name == "resnet18") {
    p.stem_width = 64;
    p.stage_widths = {64, 128, 256, 512};
    p.stage_blocks = {2, 2, 2, 2};
    p.feature_dim = 512;
  } else if (name == "resnet34") {
    p.stem_width = 64;
    p.stage_widths = {64, 128, 256, 512};
    p.stage_blocks = {3, 4, 6, 3};
    p.feature_dim = 512;
  } else {
    throw std::invalid_argument("unknown arch preset: " + name);
  }
  return p;
}

namespace {

Tensor he_init(std::vector<int> shape, int fan_in, Rng& rng) {
  double stddev = std::sqrt(2.0 / fan_in);
  return Tensor::randn(std::move(shape), rng, stddev);
}

void add_conv(ParamStore& ps, const std::string& name, int co, int ci, int k, Rng& rng) {
  ps.add(name + ".weight", he_init({co, ci, k, k}, ci * k * k, rng));
}

void add_gn(ParamStore& ps, const std::string& name, int c) {
  ps.add(name + ".gamma", Tensor::full({c}, 1.0f));
  ps.add(name + ".beta", Tensor::zeros({c}));
}

}  // namespace

Model build_model(const std::string& preset, int num_classes, uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("build_model: need at least 2 classes");
  Model m;
  m.arch = arch_preset(preset);
  m.num_device_classes = num_classes;
  Rng rng(seed_tag(seed, "clf_init"));

  add_conv(m.params, "stem.conv", m.arch.stem_width, 1, 3, rng);
  add_gn(m.params, "stem.gn", m.arch.stem_width);

  int in_ch = m.arch.stem_width;
  for (size_t s = 0; s < m.arch.stage_widths.size(); ++s) {
    int out_ch = m.arch.stage_widths[s];
    for (int b = 0; b < m.arch.stage_blocks[s]; ++b) {
      std::string pre = "s" + std::to_string(s) + ".b" + std::to_string(b) + ".";
      int stride = (s > 0 && b == 0) ? 2 : 1;
      add_conv(m.params, pre + "conv1", out_ch, in_ch, 3, rng);
      add_gn(m.params, pre + "gn1", out_ch);
      if (m.arch.residual) {
        add_conv(m.params, pre + "conv2", out_ch, out_ch, 3, rng);
        add_gn(m.params, pre + "gn2", out_ch);
        if (stride != 1 || in_ch != out_ch) {
          m.params.add(pre + "proj.weight", he_init({out_ch, in_ch, 1, 1}, in_ch, rng));
          add_gn(m.params, pre + "projgn", out_ch);
        }
      }
      in_ch = out_ch;
    }
  }
  m.params.add("head.weight", he_init({num_classes + 1, m.arch.feature_dim},
                                      m.arch.feature_dim, rng));
  m.params.add("head.bias", Tensor::zeros({num_classes + 1}));
  return m;
}

NodeId residual_block(Graph& g, NodeId x, const GraphParams& gp, const std::string& prefix,
                      int in_ch, int out_ch, int stride, int groups) {
  NodeId h = g.conv2d(x, gp[prefix + "conv1.weight"], -1, stride, 1);
  h = g.group_norm(h, gp[prefix + "gn1.gamma"], gp[prefix + "gn1.beta"], groups);
  h = g.relu(h);
  h = g.conv2d(h, gp[prefix + "conv2.weight"], -1, 1, 1);
  h = g.group_norm(h, gp[prefix + "gn2.gamma"], gp[prefix + "gn2.beta"], groups);
  NodeId sc = x;
  if (stride != 1 || in_ch != out_ch) {
    sc = g.conv2d(x, gp[prefix + "proj.weight"], -1, stride, 0);
    sc = g.group_norm(sc, gp[prefix + "projgn.gamma"], gp[prefix + "projgn.beta"], groups);
  }
  return g.relu(g.add(h, sc));
}

ForwardNodes forward_model(Graph& g, const Model& m, const GraphParams& gp, NodeId input) {
  NodeId h = g.conv2d(input, gp["stem.conv.weight"], -1, 1, 1);
  h = g.group_norm(h, gp["stem.gn.gamma"], gp["stem.gn.beta"], kNormGroups);
  h = g.relu(h);
  int in_ch = m.arch.stem_width;
  for (size_t s = 0; s < m.arch.stage_widths.size(); ++s) {
    int out_ch = m.arch.stage_widths[s];
    for (int b = 0; b < m.arch.stage_blocks[s]; ++b) {
      std::string pre = "s" + std::to_string(s) + ".b" + std::to_string(b) + ".";
      int stride = (s > 0 && b == 0) ? 2 : 1;
      if (m.arch.residual) {
        h = residual_block(g, h, gp, pre, in_ch, out_ch, stride, kNormGroups);
      } else {
        h = g.conv2d(h, gp[pre + "conv1.weight"], -1, 2, 1);
        h = g.group_norm(h, gp[pre + "gn1.gamma"], gp[pre + "gn1.beta"], kNormGroups);
        h = g.relu(h);
      }
      in_ch = out_ch;
    }
  }
  NodeId penult = g.global_avg_pool(h);
  NodeId logits = g.linear(penult, gp["head.weight"], gp["head.bias"]);
  return {logits, penult};
}

BatchOutput forward_batch(const Model& m, const float* specs, int n, int n_mels, int frames) {
  if (n < 1) throw std::invalid_argument("forward_batch: empty batch");
  Graph g;
  GraphParams gp = GraphParams::bind(g, m.params, false);
  Tensor x({n, 1, n_mels, frames});
  std::copy_n(specs, x.numel(), x.ptr());
  ForwardNodes f = forward_model(g, m, gp, g.input(std::move(x), false));
  return {g.val(f.logits), g.val(f.penult)};
}

Prediction predict(const Model& m, const float* spec, int n_mels, int frames) {
  BatchOutput out = forward_batch(m, spec, 1, n_mels, frames);
  Prediction p;
  p.logits = out.logits.data;
  for (float v : p.logits)
    if (!std::isfinite(v)) throw std::runtime_error("predict: non-finite logits");
  p.argmax = static_cast<int>(std::max_element(p.logits.begin(), p.logits.end()) -
                              p.logits.begin());
  return p;
}

std::vector<int> predict_labels(const Model& m, const data::FeatureSet& fs,
                                const std::vector<int>& idx) {
  std::vector<int> pred(idx.size());
  const int B = 64;
  int K = m.output_dim();
  std::vector<float> buf;
  for (size_t b0 = 0; b0 < idx.size(); b0 += B) {
    int bs = static_cast<int>(std::min<size_t>(B, idx.size() - b0));
    buf.resize(static_cast<size_t>(bs) * fs.spec_len());
    for (int i = 0; i < bs; ++i)
      std::copy_n(fs.spec(idx[b0 + static_cast<size_t>(i)]), fs.spec_len(),
                  buf.data() + static_cast<int64_t>(i) * fs.spec_len());
    BatchOutput out = forward_batch(m, buf.data(), bs, fs.n_mels, fs.frames);
    for (int i = 0; i < bs; ++i) {
      const float* row = out.logits.ptr() + static_cast<int64_t>(i) * K;
      pred[b0 + static_cast<size_t>(i)] =
          static_cast<int>(std::max_element(row, row + K) - row);
    }
  }
  return pred;
}

EvalReport report_from_predictions(const std::vector<int>& truth, const std::vector<int>& pred,
                                   int num_classes) {
  if (truth.empty() || truth.size() != pred.size())
    throw std::invalid_argument("evaluate: empty or mismatched prediction set");
  for (int t : truth)
    if (t < 0 || t >= num_classes) throw std::invalid_argument("evaluate: label out of range");
  EvalReport r;
  r.num_classes = num_classes;
  r.total = static_cast<int64_t>(truth.size());
  r.confusion.assign(static_cast<size_t>(num_classes),
                     std::vector<int64_t>(static_cast<size_t>(num_classes) + 1, 0));
  int64_t correct = 0, wm_hits = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    int p = std::clamp(pred[i], 0, num_classes);
    r.confusion[static_cast<size_t>(truth[i])][static_cast<size_t>(p)]++;
    if (pred[i] == truth[i]) correct++;
    if (pred[i] == num_classes) wm_hits++;
  }
  r.overall_accuracy = static_cast<double>(correct) / static_cast<double>(r.total);
  r.wm_prediction_rate = static_cast<double>(wm_hits) / static_cast<double>(r.total);

  r.per_class.resize(static_cast<size_t>(num_classes));
  std::vector<int64_t> col(static_cast<size_t>(num_classes), 0);
  for (int c = 0; c < num_classes; ++c)
    for (int t = 0; t < num_classes; ++t) col[static_cast<size_t>(c)] +=
        r.confusion[static_cast<size_t>(t)][static_cast<size_t>(c)];
  double mp = 0, mr = 0, mf = 0, wp = 0, wr = 0, wf = 0;
  bool first = true;
  for (int c = 0; c < num_classes; ++c) {
    auto& st = r.per_class[static_cast<size_t>(c)];
    int64_t tp = r.confusion[static_cast<size_t>(c)][static_cast<size_t>(c)];
    int64_t support = 0;
    for (int p = 0; p <= num_classes; ++p) support +=
        r.confusion[static_cast<size_t>(c)][static_cast<size_t>(p)];
    st.support = support;
    st.precision = col[static_cast<size_t>(c)] > 0
                       ? static_cast<double>(tp) / static_cast<double>(col[static_cast<size_t>(c)])
                       : 0.0;
    st.recall = support > 0 ? static_cast<double>(tp) / static_cast<double>(support) : 0.0;
    st.f1 = (st.precision + st.recall) > 0
                ? 2.0 * st.precision * st.recall / (st.precision + st.recall)
                : 0.0;
    mp += st.precision;
    mr += st.recall;
    mf += st.f1;
    double w = static_cast<double>(support) / static_cast<double>(r.total);
    wp += w * st.precision;
    wr += w * st.recall;
    wf += w * st.f1;
    if (support > 0) {
      if (first) {
        r.min_precision = r.max_precision = st.precision;
        r.min_recall = r.max_recall = st.recall;
        r.min_f1 = r.max_f1 = st.f1;
        first = false;
      } else {
        r.min_precision = std::min(r.min_precision, st.precision);
        r.max_precision = std::max(r.max_precision, st.precision);
        r.min_recall = std::min(r.min_recall, st.recall);
        r.max_recall = std::max(r.max_recall, st.recall);
        r.min_f1 = std::min(r.min_f1, st.f1);
        r.max_f1 = std::max(r.max_f1, st.f1);
      }
    }
  }
  r.macro_precision = mp / num_classes;
  r.macro_recall = mr / num_classes;
  r.macro_f1 = mf / num_classes;
  r.weighted_precision = wp;
  r.weighted_recall = wr;
  r.weighted_f1 = wf;
  return r;
}

EvalReport evaluate(const Model& m, const data::FeatureSet& fs, const std::vector<int>& idx) {
  if (idx.empty()) throw std::invalid_argument("evaluate: empty set");
  std::vector<int> truth(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) truth[i] = fs.labels[static_cast<size_t>(idx[i])];
  std::vector<int> pred = predict_labels(m, fs, idx);
  return report_from_predictions(truth, pred, m.num_device_classes);
}

TrainLog train_model(Model& model, const data::FeatureSet& fs, const std::vector<int>& train_idx,
                     const std::vector<int>& val_idx, const wm::WatermarkKey* key,
                     const WmTrainConfig& wm_cfg, const nn::TrainHyper& hyper,
                     const nn::AugmentConfig& aug, uint64_t seed, bool early_stop,
                     bool restore_best) {
  hyper.validate();
  if (train_idx.empty()) throw std::invalid_argument("train: empty training set");
  {
    std::set<int> tr(train_idx.begin(), train_idx.end());
    for (int v : val_idx)
      if (tr.count(v)) throw std::invalid_argument("train: train/val sets overlap");
  }
  bool use_wm = wm_cfg.enabled && key != nullptr;
  if (use_wm) {
    if (key->y_wm != model.num_device_classes)
      throw std::invalid_argument("train: key reserved class does not match model");
    if (key->feature_dim != model.arch.feature_dim)
      throw std::invalid_argument("train: key feature_dim does not match model");
  }

  const int M = fs.n_mels, F = fs.frames;
  const int64_t slen = fs.spec_len();
  const int B = hyper.batch_size;
  int64_t steps_per_epoch = (static_cast<int64_t>(train_idx.size()) + B - 1) / B;
  int64_t total_steps = steps_per_epoch * hyper.max_epochs;

  nn::AdamW opt;
  opt.weight_decay = static_cast<float>(hyper.weight_decay);

  TrainLog log;
  std::vector<Tensor> best_values;
  double best_acc = -1.0;
  int since_best = 0;
  int64_t gstep = 0;

  for (int epoch = 0; epoch < hyper.max_epochs; ++epoch) {
    std::vector<int> order = train_idx;
    Rng shuffle_rng(seed_mix(seed_tag(seed, "shuffle"), static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = shuffle_rng.uniform_int(static_cast<uint32_t>(i));
      std::swap(order[i - 1], order[j]);
    }

    double ep_loss = 0.0;
    int64_t nb = 0;
    for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(B)) {
      int bs = static_cast<int>(std::min<size_t>(B, order.size() - b0));
      uint64_t batch_tag = (static_cast<uint64_t>(epoch) << 32) | (b0 / B);

      Tensor x({bs, 1, M, F});
      std::vector<int> labels(static_cast<size_t>(bs));
      for (int i = 0; i < bs; ++i) {
        std::copy_n(fs.spec(order[b0 + static_cast<size_t>(i)]), slen,
                    x.ptr() + static_cast<int64_t>(i) * slen);
        labels[static_cast<size_t>(i)] = fs.labels[static_cast<size_t>(order[b0 + i])];
      }
      if (aug.enabled) {
        Rng aug_rng(seed_mix(seed_tag(seed, "aug"), batch_tag));
        for (int i = 0; i < bs; ++i)
          nn::light_spec_aug(x.ptr() + static_cast<int64_t>(i) * slen, M, F, aug, aug_rng);
      }

      std::vector<int> task_rows, trig_rows, adv_rows;
      int n_wm = use_wm ? static_cast<int>(std::lround(wm_cfg.p_wm * bs)) : 0;
      n_wm = std::min(n_wm, bs > 1 ? bs - 1 : 0);  // keep at least one task sample
      int n_adv = (use_wm && wm_cfg.adversarial) ? n_wm / 2 : 0;
      if (n_wm > 0) {
        Rng wm_rng(seed_mix(seed_tag(seed, "wmsel"), batch_tag));
        std::vector<int> perm(static_cast<size_t>(bs));
        for (int i = 0; i < bs; ++i) perm[static_cast<size_t>(i)] = i;
        for (int i = 0; i < n_wm; ++i) {
          int j = i + static_cast<int>(wm_rng.uniform_int(static_cast<uint32_t>(bs - i)));
          std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
        }
        std::vector<int> wm_rows(perm.begin(), perm.begin() + n_wm);
        std::sort(wm_rows.begin(), wm_rows.end());
        for (int r : wm_rows) {
          wm::apply_trigger(x.ptr() + static_cast<int64_t>(r) * slen, M, F, *key);
          labels[static_cast<size_t>(r)] = key->y_wm;
        }
        adv_rows.assign(wm_rows.begin(), wm_rows.begin() + n_adv);
        trig_rows.assign(wm_rows.begin() + n_adv, wm_rows.end());
        if (!adv_rows.empty()) {
          Tensor advx({static_cast<int>(adv_rows.size()), 1, M, F});
          for (size_t i = 0; i < adv_rows.size(); ++i)
            std::copy_n(x.ptr() + static_cast<int64_t>(adv_rows[i]) * slen, slen,
                        advx.ptr() + static_cast<int64_t>(i) * slen);
          advx = wm::craft_adversarial(model, advx, *key);
          for (size_t i = 0; i < adv_rows.size(); ++i)
            std::copy_n(advx.ptr() + static_cast<int64_t>(i) * slen, slen,
                        x.ptr() + static_cast<int64_t>(adv_rows[i]) * slen);
        }
        std::set<int> wmset(wm_rows.begin(), wm_rows.end());
        for (int i = 0; i < bs; ++i)
          if (!wmset.count(i)) task_rows.push_back(i);
      } else {
        task_rows.resize(static_cast<size_t>(bs));
        for (int i = 0; i < bs; ++i) task_rows[static_cast<size_t>(i)] = i;
      }

      Graph g;
      GraphParams gp = GraphParams::bind(g, model.params, true);
      ForwardNodes fwd = forward_model(g, model, gp, g.input(std::move(x), false));

      auto group_labels = [&](const std::vector<int>& rows) {
        std::vector<int> out(rows.size());
        for (size_t i = 0; i < rows.size(); ++i) out[i] = labels[static_cast<size_t>(rows[i])];
        return out;
      };
      float ls = hyper.task_loss == nn::TaskLoss::kCrossEntropy
                     ? static_cast<float>(hyper.label_smoothing)
                     : 0.0f;
      float fg = hyper.task_loss == nn::TaskLoss::kFocal ? static_cast<float>(hyper.focal_gamma)
                                                         : 0.0f;
      NodeId loss = g.softmax_ce(g.gather_rows(fwd.logits, task_rows), group_labels(task_rows),
                                 ls, fg);
      if (!trig_rows.empty())
        loss = g.add(loss, g.softmax_ce(g.gather_rows(fwd.logits, trig_rows),
                                        group_labels(trig_rows), 0.0f, 0.0f));
      if (!adv_rows.empty())
        loss = g.add(loss, g.softmax_ce(g.gather_rows(fwd.logits, adv_rows),
                                        group_labels(adv_rows), 0.0f, 0.0f));
      if (use_wm && wm_cfg.signature) {
        Tensor v({model.arch.feature_dim});
        std::copy(key->v.begin(), key->v.end(), v.data.begin());
        loss = g.add(loss,
                     g.cosine_align_loss(g.mean_rows(fwd.penult), std::move(v), key->lambda));
      }

      g.backward(loss);
      float lv = g.val(loss).data[0];
      if (!std::isfinite(lv))
        throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                 std::to_string(epoch) + " step " + std::to_string(gstep));
      ep_loss += lv;
      nb++;
      float lr = static_cast<float>(
          nn::lr_schedule(hyper.schedule, gstep, total_steps, hyper.learning_rate));
      opt.step(model.params, nn::collect_grads(g, gp), lr);
      gstep++;
    }
    log.train_loss.push_back(ep_loss / static_cast<double>(nb));
    log.epochs_run = epoch + 1;

    if (!val_idx.empty()) {
      std::vector<int> pred = predict_labels(model, fs, val_idx);
      int64_t correct = 0;
      for (size_t i = 0; i < val_idx.size(); ++i)
        if (pred[i] == fs.labels[static_cast<size_t>(val_idx[i])]) correct++;
      double acc = static_cast<double>(correct) / static_cast<double>(val_idx.size());
      log.val_accuracy.push_back(acc);
      if (acc > best_acc) {
        best_acc = acc;
        log.best_epoch = epoch;
        log.best_val_accuracy = acc;
        since_best = 0;
        if (restore_best) {
          best_values.clear();
          for (const auto& e : model.params.entries) best_values.push_back(e.value);
        }
      } else {
        since_best++;
        if (early_stop && since_best >= hyper.early_stop_patience) break;
      }
    }
  }

  if (restore_best && !best_values.empty())
    for (size_t i = 0; i < model.params.entries.size(); ++i)
      model.params.entries[i].value = best_values[i];
  return log;
}

std::string model_arch_json(const Model& m) {
  json j;
  j["kind"] = "classifier";
  j["preset"] = m.arch.name;
  j["num_classes"] = m.num_device_classes;
  return j.dump();
}

Checkpoint model_to_checkpoint(const Model& m, const std::string& meta_json) {
  return checkpoint_from_params(m.params, model_arch_json(m), meta_json);
}

Model model_from_checkpoint(const Checkpoint& c) {
  json j = json::parse(c.arch_json);
  if (j.at("kind").get<std::string>() != "classifier")
    throw std::runtime_error("checkpoint does not hold a classifier");
  Model m = build_model(j.at("preset").get<std::string>(), j.at("num_classes").get<int>(), 0);
  params_from_checkpoint(c, m.params);
  return m;
}

}  // namespace rffi::clf
