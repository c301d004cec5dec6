#include "resdreamer/losses.h"

#include "resdreamer/errors.h"

namespace resdreamer
{

KlLosses kl_losses(const torch::Tensor& posterior, const torch::Tensor& prior, double free_nats)
{
	KlLosses out;
	out.dyn = torch::clamp_min(categorical_kl(posterior.detach(), prior), free_nats);
	out.rep = torch::clamp_min(categorical_kl(posterior, prior.detach()), free_nats);
	out.kl = categorical_kl(posterior.detach(), prior.detach());
	return out;
}

torch::Tensor reconstruction_loss(const torch::Tensor& prediction, const torch::Tensor& target)
{
	expects(prediction.sizes() == target.sizes(), "reconstruction_loss: shape mismatch");
	return (prediction - target.detach()).square().flatten(1).sum(-1);
}

WorldModelLosses world_model_losses(
	const PosteriorPriorPair& latent, const Reconstruction& recon, const Reconstruction& targets, double free_nats)
{
	WorldModelLosses out;
	auto kl = kl_losses(latent.posterior_probs, latent.prior_probs, free_nats);
	out.dyn = kl.dyn;
	out.rep = kl.rep;
	expects(recon.raw.defined() && targets.raw.defined(), "world_model_losses: raw reconstruction required");
	out.rec = reconstruction_loss(recon.raw, targets.raw);
	if (targets.residual.defined())
	{
		expects(recon.residual.defined(), "world_model_losses: residual target without residual head");
		out.rec = out.rec + reconstruction_loss(recon.residual, targets.residual);
	}
	return out;
}

torch::Tensor lambda_returns(
	const torch::Tensor& rewards, const torch::Tensor& continues, const torch::Tensor& values, double gamma, double lambda)
{
	expects(rewards.sizes() == continues.sizes(), "lambda_returns: rewards/continues length mismatch");
	expects(values.dim() == rewards.dim() && values.size(0) == rewards.size(0) + 1 &&
						values.sizes().slice(1) == rewards.sizes().slice(1),
		"lambda_returns: values must have one bootstrap entry more than rewards");
	const int64_t horizon = rewards.size(0);
	std::vector<torch::Tensor> returns(horizon);
	auto next = values[horizon];
	for (int64_t t = horizon - 1; t >= 0; --t)
	{
		next = rewards[t] + gamma * continues[t] * ((1.0 - lambda) * values[t + 1] + lambda * next);
		returns[t] = next;
	}
	if (horizon == 0)
	{
		return torch::empty_like(rewards);
	}
	return torch::stack(returns);
}

torch::Tensor twohot_nll(const torch::Tensor& logits, const torch::Tensor& targets, const TwohotCodec& codec, double mix)
{
	expects(logits.size(-1) == codec.bins(), "twohot_nll: logits do not match codec bins");
	auto log_probs = torch::log(unimix(torch::softmax(logits, -1), mix));
	auto target = codec.encode(targets.detach()).to(logits.scalar_type());
	return -(target * log_probs).sum(-1);
}

torch::Tensor twohot_mean(const torch::Tensor& logits, const TwohotCodec& codec, double mix)
{
	return codec.decode(unimix(torch::softmax(logits, -1), mix));
}

namespace
{
torch::Tensor weighted_mean(const torch::Tensor& x, const torch::Tensor& weights)
{
	if (!weights.defined())
	{
		return x.mean();
	}
	return (x * weights.detach()).mean();
}
} // namespace

ActorLossOutput actor_loss(
	const torch::Tensor& log_probs,
	const torch::Tensor& entropy,
	const torch::Tensor& returns,
	const torch::Tensor& values,
	const ReturnScale& scale,
	double entropy_coeff,
	const torch::Tensor& weights)
{
	expects(log_probs.sizes() == returns.sizes() && returns.sizes() == values.sizes() && entropy.sizes() == log_probs.sizes(),
		"actor_loss: shape mismatch");
	ActorLossOutput out;
	out.advantage = ((returns - values) / scale.scale()).detach();
	auto per_step = -out.advantage * log_probs - entropy_coeff * entropy;
	out.loss = weighted_mean(per_step, weights);
	out.entropy = entropy.detach();
	return out;
}

torch::Tensor critic_loss(
	const torch::Tensor& critic_logits,
	const torch::Tensor& returns,
	const torch::Tensor& slow_values,
	const TwohotCodec& codec,
	double mix,
	double slow_reg_scale,
	const torch::Tensor& weights)
{
	auto loss = twohot_nll(critic_logits, returns.detach(), codec, mix);
	if (slow_values.defined() && slow_reg_scale != 0.0)
	{
		loss = loss + slow_reg_scale * twohot_nll(critic_logits, slow_values.detach(), codec, mix);
	}
	return weighted_mean(loss, weights);
}

HeadsLoss heads_loss(
	const torch::Tensor& reward_logits,
	const torch::Tensor& continue_logits,
	const torch::Tensor& rewards,
	const torch::Tensor& continues,
	const TwohotCodec& codec,
	double mix)
{
	HeadsLoss out;
	out.reward = twohot_nll(reward_logits, rewards, codec, mix);
	out.cont = torch::binary_cross_entropy_with_logits(
		continue_logits, continues.detach().to(continue_logits.scalar_type()), {}, {}, at::Reduction::None);
	return out;
}

} // namespace resdreamer
