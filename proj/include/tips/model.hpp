#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tips/autodiff.hpp"
#include "tips/nn.hpp"
#include "tips/pooling.hpp"

namespace tips {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct StageSpec {
  std::size_t channels = 16;
  std::size_t blocks = 2;
  bool operator==(const StageSpec&) const = default;
};

/**
 * Backbone: stages of 3x3 conv + batch norm + ReLU blocks; without batch norm
 * each stage ends in a learnable scalar gain instead. The first
 * `num_pooling_layers` stages end in a stride-s pooling layer; a global
 * average pool and a dense classifier close the network.
 */
struct ModelConfig {
  std::vector<StageSpec> stages{{16, 2}, {32, 2}, {64, 2}};
  std::size_t in_channels = 1;
  PoolKind pool = PoolKind::tips;
  std::size_t num_pooling_layers = 2;
  /// 0 (none), 3 or 5: binomial low-pass applied before blur/aps/tips pooling.
  std::size_t lpf = 0;
  std::size_t num_classes = 4;
  PaddingMode padding = PaddingMode::circular;
  std::size_t stride = 2;
  double aps_p = 2.0;
  /// When false the undo objective trains its own 3x3 conv instead of the
  /// one feeding the mixing coefficients.
  bool shared_psi = true;
  bool batch_norm = true;

  void validate() const {
    if (stages.empty()) throw ConfigError("model needs at least one stage");
    for (const auto& s : stages)
      if (s.channels == 0 || s.blocks == 0) throw ConfigError("stage channels and blocks must be >= 1");
    if (in_channels == 0 || num_classes == 0) throw ConfigError("in_channels and num_classes must be >= 1");
    if (stride < 2) throw ConfigError("pooling stride must be >= 2");
    if (pool == PoolKind::gap_only) {
      if (num_pooling_layers != 0) throw ConfigError("gap pooling implies num_pooling_layers = 0");
    } else if (num_pooling_layers < 1 || num_pooling_layers > stages.size()) {
      throw ConfigError("num_pooling_layers must be in [1, " + std::to_string(stages.size()) + "]");
    }
    if (lpf != 0 && lpf != 3 && lpf != 5) throw ConfigError("lpf must be 0, 3 or 5");
    if (pool == PoolKind::blur && lpf == 0) throw ConfigError("blur pooling requires lpf 3 or 5");
    if (lpf != 0 && pool != PoolKind::blur && pool != PoolKind::aps && pool != PoolKind::tips) {
      throw ConfigError(std::string("lpf is not applicable to ") + to_string(pool) + " pooling");
    }
    if (aps_p < 1.0) throw ConfigError("aps norm order must be >= 1");
  }
};

template <typename T>
class Model {
 public:
  /// Input and output of one pooling layer, recorded during a traced forward.
  struct PoolTrace {
    Tensor<T> input;
    Tensor<T> output;
  };

  /// Graph handles of one TIPS layer for the training regularizers.
  struct TipsTrace {
    std::size_t layer = 0;
    /// Map entering the polyphase mixing (after the optional low-pass).
    Var<T> input;
    Var<T> tau;
    Var<T> psi_out;
  };

  struct Forward {
    Var<T> logits;
    std::vector<PoolTrace> pools;
    std::vector<TipsTrace> tips;
  };

  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng backbone = stream(seed, Stream::init).split(0);
    Rng branch = stream(seed, Stream::init).split(1);
    std::size_t in = cfg_.in_channels;
    for (std::size_t s = 0; s < cfg_.stages.size(); ++s) {
      const auto& st = cfg_.stages[s];
      std::vector<Conv2dParams<T>> convs;
      std::vector<BatchNormParams<T>> norms;
      for (std::size_t b = 0; b < st.blocks; ++b) {
        convs.push_back(make_conv<T>(b == 0 ? in : st.channels, st.channels, 3, cfg_.padding, backbone));
        if (cfg_.batch_norm) norms.push_back(make_batch_norm<T>(st.channels));
      }
      blocks_.push_back(std::move(convs));
      norms_.push_back(std::move(norms));
      if (!cfg_.batch_norm) gains_.push_back(Var<T>::parameter(Tensor<T>::scalar(T(1))));
      if (cfg_.pool == PoolKind::tips && s < cfg_.num_pooling_layers) {
        tips_.push_back(make_tips<T>(st.channels, cfg_.stride, cfg_.padding, branch, cfg_.shared_psi));
      }
      in = st.channels;
    }
    head_weight_ = Var<T>::parameter(kaiming_normal<T>({cfg_.num_classes, in}, in, backbone));
    head_bias_ = Var<T>::parameter(Tensor<T>({cfg_.num_classes}, T(0)));
  }

  const ModelConfig& config() const { return cfg_; }
  bool is_tips() const { return cfg_.pool == PoolKind::tips; }
  std::size_t num_pooling_layers() const { return cfg_.num_pooling_layers; }
  const std::vector<TipsParams<T>>& tips_layers() const { return tips_; }

  /// Convolution trained by the undo objective of TIPS layer `l`.
  const Conv2dParams<T>& undo_conv(std::size_t l) const {
    const auto& t = tips_.at(l);
    return t.undo_psi ? *t.undo_psi : t.psi;
  }

  /// Forward pass over a batch [N, C, H, W]. Training mode normalizes with
  /// batch statistics and updates the running estimates.
  Forward forward(const Tensor<T>& x, bool trace = false, bool training = false) const {
    Forward out;
    Var<T> h = Var<T>::constant(x);
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      for (std::size_t b = 0; b < blocks_[s].size(); ++b) {
        h = conv2d(h, blocks_[s][b]);
        if (cfg_.batch_norm) h = batch_norm(h, norms_[s][b], training);
        h = relu(h);
      }
      if (!cfg_.batch_norm) h = scalar_mul(gains_[s], h);
      if (s < cfg_.num_pooling_layers) {
        Var<T> pooled = pool_layer(h, s, out);
        if (trace) out.pools.push_back({h.value(), pooled.value()});
        h = pooled;
      }
    }
    Var<T> features = global_avg_pool(h);
    out.logits = linear(features, head_weight_, head_bias_);
    return out;
  }

  /// Logits without recording a graph.
  Tensor<T> logits(const Tensor<T>& x) const {
    NoGradGuard guard;
    return forward(x).logits.value();
  }

  std::vector<std::pair<std::string, Var<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Var<T>>> out;
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      const std::string stage = "stage" + std::to_string(s);
      for (std::size_t b = 0; b < blocks_[s].size(); ++b) {
        const std::string conv = stage + ".conv" + std::to_string(b);
        out.emplace_back(conv + ".weight", blocks_[s][b].weight);
        out.emplace_back(conv + ".bias", blocks_[s][b].bias);
        if (cfg_.batch_norm) {
          out.emplace_back(stage + ".bn" + std::to_string(b) + ".weight", norms_[s][b].gamma);
          out.emplace_back(stage + ".bn" + std::to_string(b) + ".bias", norms_[s][b].beta);
        }
      }
      if (!cfg_.batch_norm) out.emplace_back(stage + ".gain", gains_[s]);
    }
    for (std::size_t l = 0; l < tips_.size(); ++l) {
      const std::string pool = "pool" + std::to_string(l);
      out.emplace_back(pool + ".psi.weight", tips_[l].psi.weight);
      out.emplace_back(pool + ".psi.bias", tips_[l].psi.bias);
      out.emplace_back(pool + ".mix.weight", tips_[l].mix_weight);
      out.emplace_back(pool + ".mix.bias", tips_[l].mix_bias);
      if (tips_[l].undo_psi) {
        out.emplace_back(pool + ".undo_psi.weight", tips_[l].undo_psi->weight);
        out.emplace_back(pool + ".undo_psi.bias", tips_[l].undo_psi->bias);
      }
    }
    out.emplace_back("head.weight", head_weight_);
    out.emplace_back("head.bias", head_bias_);
    return out;
  }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for (auto& [name, v] : named_parameters()) out.push_back(v);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, v] : named_parameters()) n += v.value().size();
    return n;
  }

  /// Non-trainable state (batch-norm running statistics).
  std::vector<std::pair<std::string, std::shared_ptr<Tensor<T>>>> named_buffers() const {
    std::vector<std::pair<std::string, std::shared_ptr<Tensor<T>>>> out;
    for (std::size_t s = 0; s < norms_.size(); ++s)
      for (std::size_t b = 0; b < norms_[s].size(); ++b) {
        const std::string bn = "stage" + std::to_string(s) + ".bn" + std::to_string(b);
        out.emplace_back(bn + ".running_mean", norms_[s][b].running_mean);
        out.emplace_back(bn + ".running_var", norms_[s][b].running_var);
      }
    return out;
  }

  /// Parameters followed by buffers, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> named_state() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (auto& [name, v] : named_parameters()) out.emplace_back(name, v.value());
    for (auto& [name, b] : named_buffers()) out.emplace_back(name, *b);
    return out;
  }

  std::vector<Tensor<T>> snapshot() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, v] : named_state()) out.push_back(std::move(v));
    return out;
  }

  /// Inverse of snapshot().
  void restore(const std::vector<Tensor<T>>& values) {
    auto params = named_parameters();
    auto buffers = named_buffers();
    if (values.size() != params.size() + buffers.size()) throw std::invalid_argument("restore: state size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      require_same_shape(params[i].second.value(), values[i], params[i].first.c_str());
      params[i].second.mutable_value() = values[i];
    }
    for (std::size_t i = 0; i < buffers.size(); ++i) {
      const auto& v = values[params.size() + i];
      require_same_shape(*buffers[i].second, v, buffers[i].first.c_str());
      *buffers[i].second = v;
    }
  }

 private:
  Var<T> pool_layer(const Var<T>& h, std::size_t layer, Forward& out) const {
    const std::size_t s = cfg_.stride;
    const BlurSpec lpf{cfg_.lpf == 0 ? 5 : cfg_.lpf};
    switch (cfg_.pool) {
      case PoolKind::max: return max_pool(h, s);
      case PoolKind::avg: return avg_pool(h, s);
      case PoolKind::blur: return blur_pool(h, lpf, s, cfg_.padding);
      case PoolKind::aps: return aps_pool(cfg_.lpf ? blur(h, lpf, cfg_.padding) : h, ApsSpec{cfg_.aps_p}, s);
      case PoolKind::tips: {
        Var<T> in = cfg_.lpf ? blur(h, lpf, cfg_.padding) : h;
        TipsMixing<T> mix = tips_mixing(in, tips_.at(layer));
        out.tips.push_back({layer, in, mix.tau, mix.psi_out});
        return tips_combine(in, mix.tau, s);
      }
      case PoolKind::gap_only: break;
    }
    throw ConfigError("no pooling layer for gap-only models");
  }

  ModelConfig cfg_;
  std::vector<std::vector<Conv2dParams<T>>> blocks_;
  std::vector<std::vector<BatchNormParams<T>>> norms_;
  std::vector<Var<T>> gains_;
  std::vector<TipsParams<T>> tips_;
  Var<T> head_weight_;
  Var<T> head_bias_;
};

}  // namespace tips
