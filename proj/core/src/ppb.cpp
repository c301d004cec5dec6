#include "resdreamer/ppb.h"

#include "resdreamer/errors.h"
#include "resdreamer/numerics.h"

#include <string>

namespace resdreamer
{

namespace
{
constexpr double kNormEps = 1e-3;

bool has_nan(const torch::Tensor& t)
{
	return t.defined() && torch::isnan(t).any().item<bool>();
}
} // namespace

int PpbConfig::cnn_stages() const
{
	int stages = 0;
	int size = image_height;
	while (size > 4)
	{
		size /= 2;
		++stages;
	}
	return stages;
}

void PpbConfig::validate() const
{
	expects(h_size > 0 && latent_groups > 0 && latent_classes > 0 && hidden_size > 0, "ppb: sizes must be positive");
	expects(encoder_channels > 0 && decoder_channels > 0 && input_channels > 0 && action_size > 0,
		"ppb: channel and action counts must be positive");
	expects(image_height == image_width, "ppb: images must be square");
	expects(image_height >= 8 && (image_height & (image_height - 1)) == 0, "ppb: image size must be a power of two >= 8");
	expects(decode_raw || decode_residual, "ppb: at least one decoder head is required");
	expects(unimix >= 0.0 && unimix < 1.0, "ppb: unimix must lie in [0,1)");
}

torch::Tensor sample_latent(const torch::Tensor& probs, at::Generator& generator)
{
	const int64_t classes = probs.size(-1);
	torch::Tensor one_hot;
	{
		torch::NoGradGuard no_grad;
		auto flat = probs.detach().reshape({-1, classes});
		auto index = torch::multinomial(flat, 1, /*replacement=*/true, generator).squeeze(-1);
		one_hot = torch::one_hot(index, classes).to(probs.scalar_type()).view(probs.sizes());
	}
	return one_hot + probs - probs.detach();
}

ChannelNormImpl::ChannelNormImpl(int channels)
		: norm_(register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels}).eps(kNormEps))))
{
}

torch::Tensor ChannelNormImpl::forward(const torch::Tensor& x)
{
	return norm_(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});
}

DenseBlockImpl::DenseBlockImpl(int input, int output)
		: linear_(register_module("linear", torch::nn::Linear(torch::nn::LinearOptions(input, output).bias(false))))
		, norm_(register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({output}).eps(kNormEps))))
{
}

torch::Tensor DenseBlockImpl::forward(const torch::Tensor& x)
{
	return torch::silu(norm_(linear_(x)));
}

PpbImpl::PpbImpl(PpbConfig config) : config_(std::move(config))
{
	config_.validate();
	const int stages = config_.cnn_stages();
	const int z_size = config_.latent_size();

	seq_in_ = register_module("seq_in", DenseBlock(z_size + config_.action_size, config_.hidden_size));
	gru_linear_ = register_module(
		"gru_linear",
		torch::nn::Linear(torch::nn::LinearOptions(config_.hidden_size + config_.h_size, 3 * config_.h_size).bias(false)));
	gru_norm_ = register_module(
		"gru_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({3 * config_.h_size}).eps(kNormEps)));

	encoder_cnn_ = torch::nn::Sequential();
	int in_channels = config_.input_channels;
	int channels = config_.encoder_channels;
	for (int s = 0; s < stages; ++s)
	{
		encoder_cnn_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, channels, 4).stride(2).padding(1).bias(false)));
		encoder_cnn_->push_back(ChannelNorm(channels));
		encoder_cnn_->push_back(torch::nn::SiLU());
		in_channels = channels;
		channels *= 2;
	}
	register_module("encoder_cnn", encoder_cnn_);
	embed_size_ = in_channels * 4 * 4;
	posterior_hidden_ = register_module("posterior_hidden", DenseBlock(embed_size_ + config_.h_size, config_.hidden_size));
	posterior_logits_ = register_module("posterior_logits", torch::nn::Linear(config_.hidden_size, z_size));

	prior_hidden_ = register_module("prior_hidden", DenseBlock(config_.h_size, config_.hidden_size));
	prior_logits_ = register_module("prior_logits", torch::nn::Linear(config_.hidden_size, z_size));

	decoder_top_channels_ = config_.decoder_channels << (stages - 1);
	decoder_in_ = register_module("decoder_in", DenseBlock(config_.h_size + z_size, decoder_top_channels_ * 4 * 4));
	decoder_cnn_ = torch::nn::Sequential();
	channels = decoder_top_channels_;
	for (int s = 0; s < stages - 1; ++s)
	{
		decoder_cnn_->push_back(torch::nn::ConvTranspose2d(
			torch::nn::ConvTranspose2dOptions(channels, channels / 2, 4).stride(2).padding(1).bias(false)));
		decoder_cnn_->push_back(ChannelNorm(channels / 2));
		decoder_cnn_->push_back(torch::nn::SiLU());
		channels /= 2;
	}
	register_module("decoder_cnn", decoder_cnn_);
	auto head_options = torch::nn::ConvTranspose2dOptions(channels, 3, 4).stride(2).padding(1);
	if (config_.decode_raw)
	{
		raw_head_ = register_module("raw_head", torch::nn::ConvTranspose2d(head_options));
	}
	if (config_.decode_residual)
	{
		residual_head_ = register_module("residual_head", torch::nn::ConvTranspose2d(head_options));
	}
}

LayerState PpbImpl::initial_state(int64_t batch, const torch::TensorOptions& options) const
{
	return {
		torch::zeros({batch, config_.h_size}, options),
		torch::zeros({batch, config_.latent_groups, config_.latent_classes}, options)};
}

torch::Tensor PpbImpl::to_probs(const torch::Tensor& logits) const
{
	auto grouped = logits.view({logits.size(0), config_.latent_groups, config_.latent_classes});
	return unimix(torch::softmax(grouped, -1), config_.unimix);
}

torch::Tensor PpbImpl::sequence_step(const torch::Tensor& h, const torch::Tensor& z, const torch::Tensor& action)
{
	expects(h.dim() == 2 && h.size(1) == config_.h_size, "sequence_step: h shape mismatch");
	expects(action.dim() == 2 && action.size(1) == config_.action_size, "sequence_step: action shape mismatch");
	expects(!has_nan(h) && !has_nan(z) && !has_nan(action), "sequence_step: NaN input");
	auto x = seq_in_(torch::cat({z.reshape({z.size(0), -1}), action}, -1));
	auto gates = gru_norm_(gru_linear_(torch::cat({x, h}, -1))).chunk(3, -1);
	auto reset = torch::sigmoid(gates[0]);
	auto candidate = torch::tanh(reset * gates[1]);
	auto update = torch::sigmoid(gates[2] - 1.0);
	return update * candidate + (1.0 - update) * h;
}

torch::Tensor PpbImpl::embed(const torch::Tensor& obs)
{
	expects(obs.dim() == 4 && obs.size(1) == config_.input_channels,
		"encode: expected " + std::to_string(config_.input_channels) + " observation channels, got " +
			(obs.dim() == 4 ? std::to_string(obs.size(1)) : std::string("rank ") + std::to_string(obs.dim())));
	expects(obs.size(2) == config_.image_height && obs.size(3) == config_.image_width, "encode: image size mismatch");
	return encoder_cnn_->forward(obs).flatten(1);
}

torch::Tensor PpbImpl::encode(const torch::Tensor& h, const torch::Tensor& obs)
{
	auto features = torch::cat({embed(obs), h}, -1);
	return to_probs(posterior_logits_(posterior_hidden_(features)));
}

torch::Tensor PpbImpl::predict(const torch::Tensor& h)
{
	return to_probs(prior_logits_(prior_hidden_(h)));
}

Reconstruction PpbImpl::decode(const torch::Tensor& h, const torch::Tensor& z)
{
	return decode(h, z, config_.decode_raw, config_.decode_residual);
}

Reconstruction PpbImpl::decode(const torch::Tensor& h, const torch::Tensor& z, bool raw, bool residual)
{
	auto x = decoder_in_(torch::cat({h, z.reshape({z.size(0), -1})}, -1)).view({h.size(0), decoder_top_channels_, 4, 4});
	x = decoder_cnn_->forward(x);
	Reconstruction out;
	if (raw && config_.decode_raw)
	{
		out.raw = raw_head_(x);
	}
	if (residual && config_.decode_residual)
	{
		out.residual = residual_head_(x);
	}
	return out;
}

PosteriorPriorPair PpbImpl::posterior_prior(const torch::Tensor& h, const torch::Tensor& obs, at::Generator& generator)
{
	PosteriorPriorPair pair;
	pair.posterior_probs = encode(h, obs);
	pair.prior_probs = predict(h);
	pair.sampled_z = sample_latent(pair.posterior_probs, generator);
	return pair;
}

Rollout PpbImpl::open_loop_rollout(
	const LayerState& state, const ActionProvider& actions, HintSpec spec, at::Generator& generator, HintStart start)
{
	expects(spec.frames >= 1 && spec.stride >= 1, "open_loop_rollout: frames and stride must be >= 1");
	Rollout rollout;
	auto h = state.h;
	auto z = sample_latent(predict(h), generator);
	if (start == HintStart::kCurrent)
	{
		rollout.frames.push_back(decode(h, z));
	}
	const int transitions = start == HintStart::kCurrent ? spec.horizon() - 1 : spec.horizon();
	for (int step = 1; step <= transitions; ++step)
	{
		const LayerState current{h, z};
		auto action = actions(std::span<const LayerState>(&current, 1));
		h = sequence_step(h, z, action);
		z = sample_latent(predict(h), generator);
		++rollout.transitions;
		if (step % spec.stride == 0 && static_cast<int>(rollout.frames.size()) < spec.frames)
		{
			rollout.frames.push_back(decode(h, z));
		}
	}
	return rollout;
}

std::vector<torch::Tensor> PpbImpl::decoder_parameters() const
{
	std::vector<torch::Tensor> params;
	for (const auto& p : decoder_in_->parameters())
	{
		params.push_back(p);
	}
	for (const auto& p : decoder_cnn_->parameters())
	{
		params.push_back(p);
	}
	if (raw_head_)
	{
		for (const auto& p : raw_head_->parameters())
		{
			params.push_back(p);
		}
	}
	if (residual_head_)
	{
		for (const auto& p : residual_head_->parameters())
		{
			params.push_back(p);
		}
	}
	return params;
}

std::vector<torch::Tensor> PpbImpl::encoder_parameters() const
{
	std::vector<torch::Tensor> params;
	for (const auto& p : encoder_cnn_->parameters())
	{
		params.push_back(p);
	}
	for (const auto& p : posterior_hidden_->parameters())
	{
		params.push_back(p);
	}
	for (const auto& p : posterior_logits_->parameters())
	{
		params.push_back(p);
	}
	return params;
}

} // namespace resdreamer
