#include "resdreamer/behavior.h"

#include "resdreamer/errors.h"

namespace resdreamer
{

void BehaviorConfig::validate() const
{
	expects(feature_size > 0 && action_size > 0 && hidden_size > 0 && mlp_layers >= 0, "behavior: sizes must be positive");
	expects(bins >= 2, "behavior: twohot needs at least 2 bins");
	expects(unimix >= 0.0 && unimix < 1.0, "behavior: unimix must lie in [0,1)");
}

torch::Tensor behavior_features(std::span<const LayerState> layers, bool stacked)
{
	expects(!layers.empty(), "behavior_features: no layer states");
	auto flat = [](const LayerState& s) { return torch::cat({s.h, s.z.reshape({s.z.size(0), -1})}, -1); };
	if (!stacked)
	{
		return flat(layers.front());
	}
	std::vector<torch::Tensor> parts;
	for (const auto& s : layers)
	{
		parts.push_back(flat(s));
	}
	return torch::cat(parts, -1);
}

int behavior_feature_size(int h_size, int latent_size, int layers, bool stacked)
{
	return (h_size + latent_size) * (stacked ? layers : 1);
}

MlpImpl::MlpImpl(int input, int hidden, int layers, int output, bool zero_output)
{
	body_ = torch::nn::Sequential();
	int width = input;
	for (int i = 0; i < layers; ++i)
	{
		body_->push_back(DenseBlock(width, hidden));
		width = hidden;
	}
	register_module("body", body_);
	out_ = register_module("out", torch::nn::Linear(width, output));
	if (zero_output)
	{
		torch::NoGradGuard no_grad;
		out_->weight.zero_();
		out_->bias.zero_();
	}
}

torch::Tensor MlpImpl::forward(torch::Tensor x)
{
	if (!body_->is_empty())
	{
		x = body_->forward(x);
	}
	return out_(x);
}

ActorImpl::ActorImpl(const BehaviorConfig& config)
		: net_(register_module(
				"net", Mlp(config.feature_size, config.hidden_size, config.mlp_layers, config.action_size)))
		, action_size_(config.action_size)
		, unimix_(config.unimix)
{
	config.validate();
}

torch::Tensor ActorImpl::forward(const torch::Tensor& features)
{
	return unimix(torch::softmax(net_(features), -1), unimix_);
}

torch::Tensor ActorImpl::sample(const torch::Tensor& probs, at::Generator& generator) const
{
	torch::NoGradGuard no_grad;
	auto flat = probs.detach().reshape({-1, action_size_});
	auto index = torch::multinomial(flat, 1, true, generator).squeeze(-1);
	return torch::one_hot(index, action_size_).to(probs.scalar_type()).view(probs.sizes());
}

torch::Tensor ActorImpl::mode(const torch::Tensor& probs) const
{
	torch::NoGradGuard no_grad;
	return torch::one_hot(probs.argmax(-1), action_size_).to(probs.scalar_type());
}

TwohotHeadImpl::TwohotHeadImpl(const BehaviorConfig& config)
		: net_(register_module(
				"net", Mlp(config.feature_size, config.hidden_size, config.mlp_layers, config.bins, /*zero_output=*/true)))
		, codec_(config.codec())
		, unimix_(config.unimix)
{
	config.validate();
}

torch::Tensor TwohotHeadImpl::forward(const torch::Tensor& features)
{
	return net_(features);
}

torch::Tensor TwohotHeadImpl::mean(const torch::Tensor& features)
{
	return twohot_mean(forward(features), codec_, unimix_);
}

ContinueHeadImpl::ContinueHeadImpl(const BehaviorConfig& config)
		: net_(register_module("net", Mlp(config.feature_size, config.hidden_size, config.mlp_layers, 1)))
{
	config.validate();
}

torch::Tensor ContinueHeadImpl::forward(const torch::Tensor& features)
{
	return net_(features).squeeze(-1);
}

torch::Tensor ContinueHeadImpl::probability(const torch::Tensor& features)
{
	return torch::sigmoid(forward(features));
}

void slow_critic_update(const std::vector<torch::Tensor>& fast, const std::vector<torch::Tensor>& slow, double rate)
{
	expects(fast.size() == slow.size(), "slow_critic_update: parameter count mismatch");
	expects(rate >= 0.0 && rate <= 1.0, "slow_critic_update: rate must lie in [0,1]");
	torch::NoGradGuard no_grad;
	for (size_t i = 0; i < fast.size(); ++i)
	{
		expects(fast[i].sizes() == slow[i].sizes(), "slow_critic_update: parameter shape mismatch");
		slow[i].mul_(1.0 - rate).add_(fast[i], rate);
	}
}

} // namespace resdreamer
