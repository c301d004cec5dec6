#pragma once

#include <torch/torch.h>

#include <functional>
#include <span>
#include <vector>

namespace resdreamer
{

struct PpbConfig
{
	int h_size = 256;
	int latent_groups = 16;
	int latent_classes = 16;
	int hidden_size = 256;
	int encoder_channels = 16;
	int decoder_channels = 16;
	int input_channels = 15;
	int action_size = 3;
	int image_height = 32;
	int image_width = 32;
	bool decode_raw = true;
	bool decode_residual = false;
	double unimix = 0.01;

	int latent_size() const { return latent_groups * latent_classes; }
	/// Number of stride-2 stages taking the image down to 4x4.
	int cnn_stages() const;
	void validate() const;
};

/// Per-layer recurrent state. h is [B, h_size]; z is [B, groups, classes] one-hot samples carrying the
/// straight-through probability gradient.
struct LayerState
{
	torch::Tensor h;
	torch::Tensor z;
};

struct PosteriorPriorPair
{
	torch::Tensor posterior_probs;
	torch::Tensor prior_probs;
	torch::Tensor sampled_z;
};

/// Decoder outputs; a head that is not configured leaves its tensor undefined.
struct Reconstruction
{
	torch::Tensor raw;
	torch::Tensor residual;
};

/// Foresight frames F decoded every D prior-rollout steps (horizon F*D).
struct HintSpec
{
	int frames = 4;
	int stride = 1;

	int horizon() const { return frames * stride; }
};

/// Where the first hint frame sits relative to the current step.
enum class HintStart
{
	kCurrent, // frames at t, t+D, ..., t+(F-1)D
	kNext,		// frames at t+D, t+2D, ..., t+FD
};

/// Chooses one-hot actions [B, A] for a joint rollout given the per-layer states.
using ActionProvider = std::function<torch::Tensor(std::span<const LayerState>)>;

struct Rollout
{
	std::vector<Reconstruction> frames;
	int transitions = 0;
};

/// Samples one-hot categorical latents from probs [..., C]; the result carries d(sample)/d(probs) = I.
torch::Tensor sample_latent(const torch::Tensor& probs, at::Generator& generator);

/// Layer norm over the channel dim of an NCHW tensor.
class ChannelNormImpl : public torch::nn::Module
{
public:
	explicit ChannelNormImpl(int channels);
	torch::Tensor forward(const torch::Tensor& x);

private:
	torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(ChannelNorm);

/// Linear -> LayerNorm -> SiLU
class DenseBlockImpl : public torch::nn::Module
{
public:
	DenseBlockImpl(int input, int output);
	torch::Tensor forward(const torch::Tensor& x);

private:
	torch::nn::Linear linear_{nullptr};
	torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(DenseBlock);

/// Predictive processing block: sequence model, encoder (posterior), predictor (prior) and decoder.
class PpbImpl : public torch::nn::Module
{
public:
	explicit PpbImpl(PpbConfig config);

	const PpbConfig& config() const { return config_; }

	LayerState initial_state(int64_t batch, const torch::TensorOptions& options) const;

	torch::Tensor sequence_step(const torch::Tensor& h, const torch::Tensor& z, const torch::Tensor& action);
	/// Posterior probabilities [B, G, C] after unimix.
	torch::Tensor encode(const torch::Tensor& h, const torch::Tensor& obs);
	/// Prior probabilities [B, G, C] after unimix; depends on h only.
	torch::Tensor predict(const torch::Tensor& h);
	Reconstruction decode(const torch::Tensor& h, const torch::Tensor& z);
	/// Decode restricted to the requested heads.
	Reconstruction decode(const torch::Tensor& h, const torch::Tensor& z, bool raw, bool residual);

	/// Posterior, prior and a straight-through posterior sample in one call.
	PosteriorPriorPair posterior_prior(const torch::Tensor& h, const torch::Tensor& obs, at::Generator& generator);

	/// Open-loop prior rollout from `state`: F*D-1 transitions (F*D for HintStart::kNext), F decoded frames.
	Rollout open_loop_rollout(
		const LayerState& state,
		const ActionProvider& actions,
		HintSpec spec,
		at::Generator& generator,
		HintStart start = HintStart::kCurrent);

	std::vector<torch::Tensor> decoder_parameters() const;
	std::vector<torch::Tensor> encoder_parameters() const;

private:
	torch::Tensor to_probs(const torch::Tensor& logits) const;
	torch::Tensor embed(const torch::Tensor& obs);

	PpbConfig config_;

	DenseBlock seq_in_{nullptr};
	torch::nn::Linear gru_linear_{nullptr};
	torch::nn::LayerNorm gru_norm_{nullptr};

	torch::nn::Sequential encoder_cnn_{nullptr};
	DenseBlock posterior_hidden_{nullptr};
	torch::nn::Linear posterior_logits_{nullptr};

	DenseBlock prior_hidden_{nullptr};
	torch::nn::Linear prior_logits_{nullptr};

	DenseBlock decoder_in_{nullptr};
	torch::nn::Sequential decoder_cnn_{nullptr};
	torch::nn::ConvTranspose2d raw_head_{nullptr};
	torch::nn::ConvTranspose2d residual_head_{nullptr};

	int embed_size_ = 0;
	int decoder_top_channels_ = 0;
};
TORCH_MODULE(Ppb);

} // namespace resdreamer
