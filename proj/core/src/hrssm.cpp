#include "resdreamer/hrssm.h"

#include "resdreamer/errors.h"

#include <string>

namespace resdreamer
{

void HrssmConfig::validate() const
{
	expects(layers >= 1, "hrssm: at least one layer required");
	expects(hint.frames >= 1 && hint.stride >= 1, "hrssm: hint frames and stride must be >= 1");
	expects(!(only_residual_hints && no_residual), "hrssm: only_residual_hints requires residual channels");
	expects(normalizer_decay > 0.0 && normalizer_decay < 1.0, "hrssm: normalizer decay must lie in (0,1)");
	expects(normalizer_floor > 0.0, "hrssm: normalizer floor must be positive");
	for (int k = 0; k < layers; ++k)
	{
		layer_config(k).validate();
	}
}

int enhanced_channel_count(int layer, int frames, bool hint_slot, bool residual_slot)
{
	expects(layer >= 0 && frames >= 1, "enhanced_channel_count: invalid layer or frame count");
	int channels = 3;
	if (hint_slot)
	{
		channels += 3 * frames;
	}
	if (layer > 0 && residual_slot)
	{
		channels += 3;
	}
	return channels;
}

int HrssmConfig::enhanced_channels(int layer) const
{
	return enhanced_channel_count(layer, hint.frames, hint_slot(), residual_enabled());
}

PpbConfig HrssmConfig::layer_config(int layer) const
{
	PpbConfig cfg = block;
	cfg.input_channels = enhanced_channels(layer);
	cfg.decode_raw = true;
	cfg.decode_residual = residual_enabled() && layer > 0;
	return cfg;
}

int64_t HrssmConfig::traffic_per_step() const
{
	if (!residual_enabled())
	{
		return 0;
	}
	const int64_t image = 3LL * block.image_height * block.image_width;
	const int64_t down = hints == HintMode::kRollout ? hint.frames * image : 0;
	return static_cast<int64_t>(layers - 1) * (down + image);
}

torch::Tensor build_residual(
	int layer, const torch::Tensor& lower_obs, const torch::Tensor& lower_recon, EmaNormalizer& normalizer, Mode mode)
{
	expects(layer >= 1, "build_residual: layer index must be >= 1");
	expects(lower_obs.sizes() == lower_recon.sizes(), "build_residual: shape mismatch");
	auto difference = (lower_obs - lower_recon).detach();
	if (mode == Mode::kTrain)
	{
		normalizer.update(difference);
	}
	return normalizer.normalize(difference);
}

torch::Tensor build_hint(int layer, std::span<const torch::Tensor> own, std::span<const torch::Tensor> upper)
{
	expects(!own.empty() || !upper.empty(), "build_hint: no rollout frames for layer " + std::to_string(layer));
	expects(own.empty() || upper.empty() || own.size() == upper.size(), "build_hint: frame-count mismatch");
	const size_t frames = own.empty() ? upper.size() : own.size();
	std::vector<torch::Tensor> summed;
	summed.reserve(frames);
	for (size_t i = 0; i < frames; ++i)
	{
		if (own.empty())
		{
			summed.push_back(upper[i]);
		}
		else if (upper.empty())
		{
			summed.push_back(own[i]);
		}
		else
		{
			expects(own[i].sizes() == upper[i].sizes(), "build_hint: frame shape mismatch");
			summed.push_back(own[i] + upper[i]);
		}
	}
	return torch::cat(summed, 1);
}

EnhancedObservation assemble_enhanced(
	int layer, const torch::Tensor& hint, const torch::Tensor& raw, const torch::Tensor& residual)
{
	expects(raw.defined() && raw.dim() == 4 && raw.size(1) == 3, "assemble_enhanced: raw image must be [B,3,H,W]");
	expects(layer > 0 || !residual.defined(), "assemble_enhanced: the bottom layer has no residual slot");
	EnhancedObservation obs;
	std::vector<torch::Tensor> parts;
	if (hint.defined())
	{
		expects(hint.size(2) == raw.size(2) && hint.size(3) == raw.size(3), "assemble_enhanced: hint size mismatch");
		obs.hint = hint.detach();
		parts.push_back(obs.hint);
	}
	obs.raw = raw.detach();
	parts.push_back(obs.raw);
	if (residual.defined())
	{
		expects(residual.sizes() == raw.sizes(), "assemble_enhanced: residual size mismatch");
		obs.residual = residual.detach();
		parts.push_back(obs.residual);
	}
	obs.stacked = torch::cat(parts, 1).detach();
	return obs;
}

HrssmImpl::HrssmImpl(HrssmConfig config) : config_(std::move(config))
{
	config_.validate();
	for (int k = 0; k < config_.layers; ++k)
	{
		layers_.push_back(register_module("layer" + std::to_string(k), Ppb(config_.layer_config(k))));
	}
}

HierState HrssmImpl::initial_state(int64_t batch, const torch::TensorOptions& options) const
{
	HierState state;
	for (const auto& layer : layers_)
	{
		state.layers.push_back(layer->initial_state(batch, options));
	}
	for (int k = 1; k < config_.layers; ++k)
	{
		state.normalizers.emplace_back(3, config_.normalizer_decay, config_.normalizer_floor);
	}
	return state;
}

namespace
{
// Which decoder heads each layer's hint needs from the rollout.
struct RolloutHeads
{
	bool raw = false;
	bool residual = false;
};

RolloutHeads rollout_heads(const HrssmConfig& cfg, int k)
{
	if (!cfg.residual_enabled())
	{
		return {true, false};
	}
	if (k == 0)
	{
		return {!cfg.only_residual_hints, false};
	}
	return {false, true};
}

std::vector<torch::Tensor> head_frames(const std::vector<Reconstruction>& frames, bool raw)
{
	std::vector<torch::Tensor> out;
	for (const auto& f : frames)
	{
		out.push_back(raw ? f.raw : f.residual);
	}
	return out;
}
} // namespace

JointRollout HrssmImpl::joint_rollout(
	const std::vector<torch::Tensor>& h, const ActionProvider& actions, at::Generator& generator)
{
	const int layers = config_.layers;
	expects(static_cast<int>(h.size()) == layers, "joint_rollout: one deterministic state per layer required");
	const auto spec = config_.hint;
	JointRollout out;
	out.frames.resize(layers);
	std::vector<LayerState> states(layers);
	for (int k = 0; k < layers; ++k)
	{
		states[k].h = h[k];
		states[k].z = sample_latent(layers_[k]->predict(h[k]), generator);
	}
	auto decode_all = [&]() {
		for (int k = 0; k < layers; ++k)
		{
			auto heads = rollout_heads(config_, k);
			if (heads.raw || heads.residual)
			{
				out.frames[k].push_back(layers_[k]->decode(states[k].h, states[k].z, heads.raw, heads.residual));
			}
		}
	};
	if (config_.hint_start == HintStart::kCurrent)
	{
		decode_all();
	}
	const int transitions = config_.hint_start == HintStart::kCurrent ? spec.horizon() - 1 : spec.horizon();
	int decoded = config_.hint_start == HintStart::kCurrent ? 1 : 0;
	for (int step = 1; step <= transitions; ++step)
	{
		auto action = actions(states);
		for (int k = 0; k < layers; ++k)
		{
			states[k].h = layers_[k]->sequence_step(states[k].h, states[k].z, action);
			states[k].z = sample_latent(layers_[k]->predict(states[k].h), generator);
		}
		++out.transitions;
		if (step % spec.stride == 0 && decoded < spec.frames)
		{
			decode_all();
			++decoded;
		}
	}
	return out;
}

ObserveResult HrssmImpl::observe(
	const HierState& state,
	const torch::Tensor& prev_action,
	const torch::Tensor& o_raw,
	const torch::Tensor& is_first,
	Mode mode,
	const ActionProvider& hint_actions,
	at::Generator& generator)
{
	const int layers = config_.layers;
	expects(static_cast<int>(state.layers.size()) == layers, "observe: layer state count mismatch");
	expects(static_cast<int>(state.normalizers.size()) == layers - 1, "observe: normalizer count mismatch");
	expects(o_raw.dim() == 4 && o_raw.size(1) == 3, "observe: o_raw must be [B,3,H,W]");
	const int64_t batch = o_raw.size(0);
	expects(prev_action.dim() == 2 && prev_action.size(0) == batch, "observe: action batch mismatch");
	expects(is_first.numel() == batch, "observe: is_first batch mismatch");

	ObserveResult result;
	result.state.normalizers = state.normalizers;
	result.layers.resize(layers);

	auto keep = (1.0 - is_first.to(o_raw.scalar_type())).view({batch, 1});
	auto action = prev_action.to(o_raw.scalar_type()) * keep;
	std::vector<torch::Tensor> h(layers);
	for (int k = 0; k < layers; ++k)
	{
		const auto& prev = state.layers[k];
		h[k] = layers_[k]->sequence_step(prev.h * keep, prev.z * keep.view({batch, 1, 1}), action);
	}

	const auto frames = config_.hint.frames;
	const int64_t image_elements = 3 * o_raw.size(2) * o_raw.size(3);
	JointRollout rollout;
	if (config_.hints == HintMode::kRollout)
	{
		torch::NoGradGuard no_grad;
		std::vector<torch::Tensor> detached;
		for (const auto& hk : h)
		{
			detached.push_back(hk.detach());
		}
		rollout = joint_rollout(detached, hint_actions, generator);
		result.rollout_transitions = rollout.transitions;
	}

	std::vector<torch::Tensor> residuals(layers);
	for (int k = 0; k < layers; ++k)
	{
		auto& step = result.layers[k];
		auto& block = layers_[k];

		torch::Tensor hint;
		if (config_.hints == HintMode::kRollout)
		{
			std::vector<torch::Tensor> own;
			std::vector<torch::Tensor> upper;
			auto heads = rollout_heads(config_, k);
			if (heads.raw || heads.residual)
			{
				own = head_frames(rollout.frames[k], heads.raw);
			}
			if (config_.residual_enabled() && k + 1 < layers)
			{
				upper = head_frames(rollout.frames[k + 1], false);
				result.traffic_elements += static_cast<int64_t>(upper.size()) * image_elements;
			}
			hint = build_hint(k, own, upper);
		}
		else if (config_.hints == HintMode::kZero)
		{
			hint = torch::zeros({batch, 3 * frames, o_raw.size(2), o_raw.size(3)}, o_raw.options());
		}

		if (k > 0 && config_.residual_enabled())
		{
			step.residual_input = residuals[k];
		}
		step.obs = assemble_enhanced(k, hint, o_raw, step.residual_input);
		step.latent = block->posterior_prior(h[k], step.obs.stacked, generator);
		step.recon = block->decode(h[k], step.latent.sampled_z);

		Reconstruction targets{o_raw, step.residual_input};
		step.losses = world_model_losses(step.latent, step.recon, targets, config_.free_nats);
		step.kl = categorical_kl(step.latent.posterior_probs.detach(), step.latent.prior_probs.detach());
		step.rec_mse = (step.recon.raw.detach() - o_raw).square().mean();

		if (config_.residual_enabled() && k + 1 < layers)
		{
			const auto& lower_obs = k == 0 ? o_raw : step.residual_input;
			const auto& lower_recon = k == 0 ? step.recon.raw : step.recon.residual;
			residuals[k + 1] = build_residual(k + 1, lower_obs, lower_recon.detach(), result.state.normalizers[k], mode);
			result.traffic_elements += image_elements;
		}
		result.state.layers.push_back({h[k], step.latent.sampled_z});
	}
	return result;
}

ImaginedTrajectory HrssmImpl::imagine(
	const std::vector<LayerState>& start, const ActionProvider& actor, int steps, at::Generator& generator)
{
	expects(steps >= 1, "imagine: at least one step required");
	expects(static_cast<int>(start.size()) == config_.layers, "imagine: layer state count mismatch");
	torch::NoGradGuard no_grad;
	ImaginedTrajectory out;
	std::vector<LayerState> current;
	for (const auto& s : start)
	{
		current.push_back({s.h.detach(), s.z.detach()});
	}
	out.states.push_back(current);
	for (int i = 0; i < steps; ++i)
	{
		auto action = actor(current);
		std::vector<LayerState> next(current.size());
		for (size_t k = 0; k < current.size(); ++k)
		{
			next[k].h = layers_[k]->sequence_step(current[k].h, current[k].z, action);
			next[k].z = sample_latent(layers_[k]->predict(next[k].h), generator);
		}
		out.actions.push_back(action);
		out.states.push_back(next);
		current = std::move(next);
	}
	return out;
}

} // namespace resdreamer
