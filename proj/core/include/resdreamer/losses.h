#pragma once

#include "resdreamer/numerics.h"
#include "resdreamer/ppb.h"

#include <torch/torch.h>

namespace resdreamer
{

/// Per-sample dynamics/representation KL terms ([B]) with the free-bits floor applied.
struct KlLosses
{
	torch::Tensor dyn; // KL(sg(posterior) || prior), clipped below at free_nats
	torch::Tensor rep; // KL(posterior || sg(prior)), clipped below at free_nats
	torch::Tensor kl;	 // unclipped KL(posterior || prior), detached
};

KlLosses kl_losses(const torch::Tensor& posterior, const torch::Tensor& prior, double free_nats = 1.0);

/// Sum of squared errors per sample (unit-variance Gaussian NLL up to constants). The target is detached.
torch::Tensor reconstruction_loss(const torch::Tensor& prediction, const torch::Tensor& target);

struct WorldModelLosses
{
	torch::Tensor rec;
	torch::Tensor dyn;
	torch::Tensor rep;
};

/// Reconstruction plus KL terms for one layer. `targets.residual` may be undefined (bottom layer).
WorldModelLosses world_model_losses(
	const PosteriorPriorPair& latent, const Reconstruction& recon, const Reconstruction& targets, double free_nats = 1.0);

/// Bootstrapped lambda-returns along dim 0.
///
/// rewards, continues: [T, ...]; values: [T+1, ...]. R_T = v_T and
/// R_t = r_t + gamma * c_t * ((1 - lambda) * v_{t+1} + lambda * R_{t+1}); the result is [T, ...] (R_0 .. R_{T-1}).
torch::Tensor lambda_returns(
	const torch::Tensor& rewards, const torch::Tensor& continues, const torch::Tensor& values, double gamma, double lambda);

/// Negative log-likelihood of `targets` under twohot distributions given by `logits` (unimix applied).
torch::Tensor twohot_nll(const torch::Tensor& logits, const torch::Tensor& targets, const TwohotCodec& codec, double mix);

/// Expected value of twohot distributions given by `logits`.
torch::Tensor twohot_mean(const torch::Tensor& logits, const TwohotCodec& codec, double mix);

struct ActorLossOutput
{
	torch::Tensor loss;
	torch::Tensor advantage; // normalised, detached
	torch::Tensor entropy;	 // detached
};

/// -((R - sg(v)) / max(1, S)) * log pi(a|s) - eta * H[pi], averaged with optional weights.
ActorLossOutput actor_loss(
	const torch::Tensor& log_probs,
	const torch::Tensor& entropy,
	const torch::Tensor& returns,
	const torch::Tensor& values,
	const ReturnScale& scale,
	double entropy_coeff,
	const torch::Tensor& weights = {});

/// Critic twohot NLL of detached returns plus the slow-critic regulariser.
torch::Tensor critic_loss(
	const torch::Tensor& critic_logits,
	const torch::Tensor& returns,
	const torch::Tensor& slow_values,
	const TwohotCodec& codec,
	double mix,
	double slow_reg_scale = 1.0,
	const torch::Tensor& weights = {});

struct HeadsLoss
{
	torch::Tensor reward;
	torch::Tensor cont;
};

/// Reward twohot NLL and continuation Bernoulli NLL, per element.
HeadsLoss heads_loss(
	const torch::Tensor& reward_logits,
	const torch::Tensor& continue_logits,
	const torch::Tensor& rewards,
	const torch::Tensor& continues,
	const TwohotCodec& codec,
	double mix);

} // namespace resdreamer
