#include "unihand/transformer.hpp"

#include <cmath>

#include "unihand/error.hpp"
#include "unihand/rope.hpp"

namespace unihand::nn {

void TransformerConfig::validate() const {
  if (layers < 1 || hidden < 1 || heads < 1 || feedforward < 1) {
    throw ShapeMismatch("transformer dimensions must be positive");
  }
  if (hidden % heads != 0) throw ShapeMismatch("hidden size must be divisible by the head count");
  if (head_dim() % 2 != 0) throw OddDimension("head dimension must be even for RoPE");
  if (dropout < 0.0 || dropout >= 1.0) throw ShapeMismatch("dropout must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = nlohmann::json{{"layers", c.layers},
                     {"hidden", c.hidden},
                     {"heads", c.heads},
                     {"feedforward", c.feedforward},
                     {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  c.layers = j.value("layers", c.layers);
  c.hidden = j.value("hidden", c.hidden);
  c.heads = j.value("heads", c.heads);
  c.feedforward = j.value("feedforward", c.feedforward);
  c.dropout = j.value("dropout", c.dropout);
}

torch::Tensor attention_weights(const torch::Tensor& q, const torch::Tensor& k) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
  return torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale, -1);
}

torch::Tensor scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v) {
  return torch::matmul(attention_weights(q, k), v);
}

torch::Tensor split_heads(const torch::Tensor& x, int64_t heads) {
  const auto b = x.size(0), l = x.size(1), d = x.size(2);
  return x.reshape({b, l, heads, d / heads}).transpose(1, 2);
}

torch::Tensor merge_heads(const torch::Tensor& x) {
  const auto b = x.size(0), h = x.size(1), l = x.size(2), dh = x.size(3);
  return x.transpose(1, 2).reshape({b, l, h * dh});
}

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int64_t hidden, int64_t heads, int64_t kv_dim) : heads_(heads) {
  if (kv_dim < 0) kv_dim = hidden;
  q_proj_ = register_module("q_proj", torch::nn::Linear(hidden, hidden));
  k_proj_ = register_module("k_proj", torch::nn::Linear(kv_dim, hidden));
  v_proj_ = register_module("v_proj", torch::nn::Linear(kv_dim, hidden));
  out_proj_ = register_module("out_proj", torch::nn::Linear(hidden, hidden));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& key_value,
                                              const torch::Tensor& query_pos, const torch::Tensor& key_pos) {
  auto q = split_heads(q_proj_(query), heads_);
  auto k = split_heads(k_proj_(key_value), heads_);
  auto v = split_heads(v_proj_(key_value), heads_);
  if (query_pos.defined() && key_pos.defined()) {
    q = perceptron::rope_1d(q, query_pos);
    k = perceptron::rope_1d(k, key_pos);
  }
  return out_proj_(merge_heads(scaled_dot_attention(q, k, v)));
}

FeedForwardImpl::FeedForwardImpl(int64_t hidden, int64_t inner) {
  fc1_ = register_module("fc1", torch::nn::Linear(hidden, inner));
  fc2_ = register_module("fc2", torch::nn::Linear(inner, hidden));
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor& x) { return fc2_(torch::gelu(fc1_(x))); }

EncoderLayerImpl::EncoderLayerImpl(const TransformerConfig& config) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.hidden})));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.hidden})));
  attn_ = register_module("attn", MultiHeadAttention(config.hidden, config.heads));
  ff_ = register_module("ff", FeedForward(config.hidden, config.feedforward));
  drop_ = register_module("drop", torch::nn::Dropout(config.dropout));
}

torch::Tensor EncoderLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& positions) {
  auto h = norm1_(x);
  auto y = x + drop_(attn_(h, h, positions, positions));
  return y + drop_(ff_(norm2_(y)));
}

TransformerEncoderImpl::TransformerEncoderImpl(const TransformerConfig& config) {
  config.validate();
  for (int64_t i = 0; i < config.layers; ++i) layers_->push_back(EncoderLayer(config));
  register_module("layers", layers_);
  final_norm_ = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.hidden})));
}

torch::Tensor TransformerEncoderImpl::forward(torch::Tensor x, const torch::Tensor& positions) {
  for (const auto& layer : *layers_) x = layer->as<EncoderLayer>()->forward(x, positions);
  return final_norm_(x);
}

torch::Tensor positions(int64_t length, int64_t start) {
  return torch::arange(start, start + length, torch::TensorOptions().dtype(torch::kFloat64));
}

}  // namespace unihand::nn
