#pragma once

#include "resdreamer/losses.h"
#include "resdreamer/numerics.h"
#include "resdreamer/ppb.h"

#include <torch/torch.h>

#include <span>
#include <vector>

namespace resdreamer
{

struct BehaviorConfig
{
	int feature_size = 0;
	int action_size = 3;
	int hidden_size = 256;
	int mlp_layers = 2;
	int bins = 255;
	double twohot_limit = 20.0;
	double unimix = 0.01;
	bool stacked_state_heads = false;

	void validate() const;
	TwohotCodec codec() const { return TwohotCodec::symexp_spaced(bins, twohot_limit); }
};

struct LambdaReturnParams
{
	double gamma = 1.0 - 1.0 / 333.0;
	double lambda = 0.95;
};

/// Features consumed by the heads: layer-0 (h, flat z) or all layers concatenated.
torch::Tensor behavior_features(std::span<const LayerState> layers, bool stacked);
int behavior_feature_size(int h_size, int latent_size, int layers, bool stacked);

/// Stack of DenseBlocks followed by a linear output.
class MlpImpl : public torch::nn::Module
{
public:
	MlpImpl(int input, int hidden, int layers, int output, bool zero_output = false);
	torch::Tensor forward(torch::Tensor x);

private:
	torch::nn::Sequential body_{nullptr};
	torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(Mlp);

class ActorImpl : public torch::nn::Module
{
public:
	explicit ActorImpl(const BehaviorConfig& config);

	/// Action probabilities with unimix applied.
	torch::Tensor forward(const torch::Tensor& features);
	torch::Tensor sample(const torch::Tensor& probs, at::Generator& generator) const;
	torch::Tensor mode(const torch::Tensor& probs) const;

	int action_size() const { return action_size_; }

private:
	Mlp net_{nullptr};
	int action_size_;
	double unimix_;
};
TORCH_MODULE(Actor);

/// Twohot-distributed scalar head, used for the critic and the reward predictor.
class TwohotHeadImpl : public torch::nn::Module
{
public:
	explicit TwohotHeadImpl(const BehaviorConfig& config);

	torch::Tensor forward(const torch::Tensor& features); // logits
	torch::Tensor mean(const torch::Tensor& features);		 // decoded expectation
	const TwohotCodec& codec() const { return codec_; }
	double unimix() const { return unimix_; }

private:
	Mlp net_{nullptr};
	TwohotCodec codec_;
	double unimix_;
};
TORCH_MODULE(TwohotHead);

class ContinueHeadImpl : public torch::nn::Module
{
public:
	explicit ContinueHeadImpl(const BehaviorConfig& config);

	torch::Tensor forward(const torch::Tensor& features); // logits [..]
	torch::Tensor probability(const torch::Tensor& features);

private:
	Mlp net_{nullptr};
};
TORCH_MODULE(ContinueHead);

/// slow <- (1 - rate) * slow + rate * fast, elementwise over matching parameter lists.
void slow_critic_update(const std::vector<torch::Tensor>& fast, const std::vector<torch::Tensor>& slow, double rate);

} // namespace resdreamer
