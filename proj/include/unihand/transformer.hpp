#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace unihand::nn {

struct TransformerConfig {
  int64_t layers = 2;
  int64_t hidden = 64;
  int64_t heads = 4;
  int64_t feedforward = 128;
  double dropout = 0.1;

  int64_t head_dim() const { return hidden / heads; }
  void validate() const;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

/// Softmax(q k^T / sqrt(d)) over the last two dims.
torch::Tensor attention_weights(const torch::Tensor& q, const torch::Tensor& k);
torch::Tensor scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);

/// Splits [B, L, D] into heads [B, H, L, D/H] and back.
torch::Tensor split_heads(const torch::Tensor& x, int64_t heads);
torch::Tensor merge_heads(const torch::Tensor& x);

/// Multi-head attention with optional temporal RoPE on queries and keys.
class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(int64_t hidden, int64_t heads, int64_t kv_dim = -1);

  /// query [B, Lq, D], key_value [B, Lk, Dkv]; RoPE is applied when both
  /// position tensors are defined.
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key_value,
                        const torch::Tensor& query_pos = {}, const torch::Tensor& key_pos = {});

 private:
  int64_t heads_;
  torch::nn::Linear q_proj_{nullptr}, k_proj_{nullptr}, v_proj_{nullptr}, out_proj_{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

class FeedForwardImpl : public torch::nn::Module {
 public:
  FeedForwardImpl(int64_t hidden, int64_t inner);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(FeedForward);

/// Pre-norm encoder layer: self-attention with temporal RoPE, then GELU MLP.
class EncoderLayerImpl : public torch::nn::Module {
 public:
  explicit EncoderLayerImpl(const TransformerConfig& config);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& positions);

 private:
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  MultiHeadAttention attn_{nullptr};
  FeedForward ff_{nullptr};
  torch::nn::Dropout drop_{nullptr};
};
TORCH_MODULE(EncoderLayer);

class TransformerEncoderImpl : public torch::nn::Module {
 public:
  explicit TransformerEncoderImpl(const TransformerConfig& config);
  /// x [B, L, D]; positions [L].
  torch::Tensor forward(torch::Tensor x, const torch::Tensor& positions);

 private:
  torch::nn::ModuleList layers_;
  torch::nn::LayerNorm final_norm_{nullptr};
};
TORCH_MODULE(TransformerEncoder);

/// 0, 1, ..., length - 1 as float64.
torch::Tensor positions(int64_t length, int64_t start = 0);

}  // namespace unihand::nn
