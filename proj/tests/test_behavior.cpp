#include "resdreamer/behavior.h"
#include "resdreamer/errors.h"
#include "resdreamer/losses.h"

#include "testing.h"

#include <gtest/gtest.h>

#include <cmath>

namespace resdreamer
{
namespace
{

using testing::generator;
using testing::max_abs;

BehaviorConfig tiny_behavior(int feature_size = 12)
{
	BehaviorConfig c;
	c.feature_size = feature_size;
	c.hidden_size = 16;
	c.bins = 41;
	return c;
}

/// Standalone backward recursion over plain vectors.
std::vector<double> lambda_oracle(
	const std::vector<double>& r, const std::vector<double>& c, const std::vector<double>& v, double gamma, double lambda)
{
	const size_t horizon = r.size();
	std::vector<double> out(horizon + 1);
	out[horizon] = v[horizon];
	for (size_t i = horizon; i-- > 0;)
	{
		out[i] = r[i] + gamma * c[i] * ((1.0 - lambda) * v[i + 1] + lambda * out[i + 1]);
	}
	out.pop_back();
	return out;
}

torch::Tensor to_tensor(const std::vector<double>& v)
{
	return torch::tensor(v, torch::kFloat64);
}

TEST(Heads, OutputRanges)
{
	torch::manual_seed(1);
	auto c = tiny_behavior();
	c.action_size = 4;
	Actor actor(c);
	TwohotHead reward(c);
	ContinueHead cont(c);
	auto gen = generator(1);
	auto features = torch::randn({32, c.feature_size}, gen) * 3.0;
	auto probs = actor->forward(features);
	EXPECT_LT(max_abs(probs.sum(-1) - 1.0), 1e-6);
	EXPECT_GE(probs.min().item<double>(), 0.01 / 4 - 1e-7);
	auto p = cont->probability(features);
	EXPECT_GT(p.min().item<double>(), 0.0);
	EXPECT_LT(p.max().item<double>(), 1.0);
	EXPECT_TRUE(torch::isfinite(reward->mean(features)).all().item<bool>());
	auto sample = actor->sample(probs, gen);
	EXPECT_TRUE(torch::equal(sample.sum(-1), torch::ones({32})));
	EXPECT_TRUE(torch::equal(actor->mode(probs).argmax(-1), probs.argmax(-1)));
}

TEST(Heads, FeaturesDefaultToBottomLayer)
{
	auto gen = generator(2);
	std::vector<LayerState> layers{
		{torch::randn({3, 5}, gen), torch::rand({3, 2, 2}, gen)},
		{torch::randn({3, 5}, gen), torch::rand({3, 2, 2}, gen)},
	};
	auto bottom = behavior_features(layers, false);
	EXPECT_EQ(bottom.size(1), behavior_feature_size(5, 4, 2, false));
	EXPECT_TRUE(torch::equal(bottom.slice(1, 0, 5), layers[0].h));
	auto stacked = behavior_features(layers, true);
	EXPECT_EQ(stacked.size(1), behavior_feature_size(5, 4, 2, true));
	EXPECT_TRUE(torch::equal(stacked.slice(1, 9, 14), layers[1].h));
}

TEST(LambdaReturns, Examples)
{
	auto terminal = lambda_returns(to_tensor({1.0, 2.0, 3.0}), torch::zeros({3}, torch::kFloat64),
		to_tensor({5.0, 6.0, 7.0, 8.0}), 0.99, 0.95);
	EXPECT_LT(max_abs(terminal - to_tensor({1.0, 2.0, 3.0})), 1e-12);

	auto two = lambda_returns(to_tensor({1.0}), to_tensor({1.0}), to_tensor({2.0, 3.0}), 0.9, 0.95);
	EXPECT_NEAR(two[0].item<double>(), 3.7, 1e-12);
	EXPECT_NEAR(two[0].item<double>(), 1.0 + 0.9 * (0.05 * 3.0 + 0.95 * 3.0), 1e-12);

	EXPECT_THROW(lambda_returns(to_tensor({1.0}), to_tensor({1.0}), to_tensor({1.0}), 0.9, 0.95), ContractError);
	EXPECT_THROW(lambda_returns(to_tensor({1.0}), to_tensor({1.0, 1.0}), to_tensor({1.0, 2.0}), 0.9, 0.95), ContractError);
}

TEST(LambdaReturns, MatchesOracleOnRandomSequences)
{
	std::mt19937_64 rng(3);
	std::normal_distribution<double> normal;
	std::bernoulli_distribution alive(0.8);
	std::uniform_real_distribution<double> unit(0.05, 0.999);
	for (int trial = 0; trial < 200; ++trial)
	{
		const int horizon = 1 + trial % 10;
		std::vector<double> r(horizon);
		std::vector<double> c(horizon);
		std::vector<double> v(horizon + 1);
		for (int t = 0; t < horizon; ++t)
		{
			r[t] = normal(rng);
			c[t] = alive(rng) ? 1.0 : 0.0;
		}
		for (auto& x : v)
		{
			x = normal(rng) * 5.0;
		}
		const double gamma = unit(rng);
		const double lambda = unit(rng);
		auto expected = lambda_oracle(r, c, v, gamma, lambda);
		auto got = lambda_returns(to_tensor(r), to_tensor(c), to_tensor(v), gamma, lambda);
		for (int t = 0; t < horizon; ++t)
		{
			ASSERT_NEAR(got[t].item<double>(), expected[t], 1e-6);
		}
	}

	// batched columns are independent sequences
	auto r = torch::randn({6, 4}, torch::kFloat64);
	auto c = torch::ones({6, 4}, torch::kFloat64);
	auto v = torch::randn({7, 4}, torch::kFloat64);
	auto batched = lambda_returns(r, c, v, 0.997, 0.95);
	for (int col = 0; col < 4; ++col)
	{
		auto single = lambda_returns(r.select(1, col), c.select(1, col), v.select(1, col), 0.997, 0.95);
		EXPECT_LT(max_abs(batched.select(1, col) - single), 1e-12);
	}
}

TEST(LambdaReturns, DefaultParameters)
{
	LambdaReturnParams p;
	EXPECT_DOUBLE_EQ(p.gamma, 1.0 - 1.0 / 333.0);
	EXPECT_DOUBLE_EQ(p.lambda, 0.95);
}

TEST(CriticLoss, OneHotLogitsAtExactBin)
{
	auto codec = TwohotCodec::identity({-1.0, 0.0, 1.0});
	auto logits = torch::tensor({{-1e4, 1e4, -1e4}}, torch::kFloat64);
	auto loss = critic_loss(logits, torch::zeros({1}, torch::kFloat64), {}, codec, 0.01, 0.0);
	EXPECT_NEAR(loss.item<double>(), -std::log(0.99 + 0.01 / 3.0), 1e-12);
}

TEST(CriticLoss, NonNegativeWithSlowRegulariser)
{
	auto codec = TwohotCodec::symexp_spaced(41, 20.0);
	auto gen = generator(4);
	auto logits = torch::randn({64, 41}, gen, torch::kFloat64) * 4.0;
	auto returns = torch::randn({64}, gen, torch::kFloat64) * 10.0;
	auto slow = torch::randn({64}, gen, torch::kFloat64) * 10.0;
	auto plain = critic_loss(logits, returns, {}, codec, 0.01, 0.0);
	auto regularised = critic_loss(logits, returns, slow, codec, 0.01, 1.0);
	EXPECT_GE(plain.item<double>(), 0.0);
	auto expected = (twohot_nll(logits, returns, codec, 0.01) + twohot_nll(logits, slow, codec, 0.01)).mean();
	EXPECT_NEAR(regularised.item<double>(), expected.item<double>(), 1e-12);
}

TEST(CriticLoss, FiniteDifferenceOnThreeBinCodec)
{
	auto codec = TwohotCodec::identity({-1.0, 0.0, 1.0});
	auto gen = generator(5);
	auto logits = torch::randn({4, 3}, gen, torch::kFloat64);
	auto returns = torch::tensor({-0.7, 0.2, 0.9, 3.0}, torch::kFloat64);
	auto slow = torch::tensor({0.1, -0.4, 0.5, -2.0}, torch::kFloat64);
	auto probe = logits.clone().set_requires_grad(true);
	critic_loss(probe, returns, slow, codec, 0.01, 1.0).backward();
	const double eps = 1e-6;
	for (int64_t i = 0; i < logits.numel(); ++i)
	{
		auto plus = logits.clone();
		auto minus = logits.clone();
		plus.view(-1)[i] += eps;
		minus.view(-1)[i] -= eps;
		const double numeric = (critic_loss(plus, returns, slow, codec, 0.01, 1.0).item<double>() -
														 critic_loss(minus, returns, slow, codec, 0.01, 1.0).item<double>()) /
													 (2.0 * eps);
		EXPECT_NEAR(probe.grad().view(-1)[i].item<double>(), numeric, 1e-6);
	}
}

TEST(ActorLoss, ZeroAdvantageLeavesEntropyTerm)
{
	auto gen = generator(6);
	auto log_probs = torch::randn({5, 3}, gen, torch::kFloat64);
	auto entropy = torch::rand({5, 3}, gen, torch::kFloat64);
	auto values = torch::randn({5, 3}, gen, torch::kFloat64);
	ReturnScale scale;
	auto out = actor_loss(log_probs, entropy, values, values, scale, 3e-4);
	EXPECT_EQ(max_abs(out.advantage), 0.0);
	EXPECT_NEAR(out.loss.item<double>(), -3e-4 * entropy.mean().item<double>(), 1e-15);
}

TEST(ActorLoss, NormalisedAdvantageInvariances)
{
	auto gen = generator(7);
	auto log_probs = torch::randn({50}, gen, torch::kFloat64);
	auto entropy = torch::rand({50}, gen, torch::kFloat64);
	auto returns = torch::randn({50}, gen, torch::kFloat64) * 10.0;
	auto values = torch::randn({50}, gen, torch::kFloat64) * 10.0;

	ReturnScale s1;
	s1.update(returns);
	ASSERT_GT(s1.scale(), 1.0);
	auto base = actor_loss(log_probs, entropy, returns, values, s1, 3e-4);

	// shift by a constant
	ReturnScale s2;
	s2.update(returns + 123.0);
	auto shifted = actor_loss(log_probs, entropy, returns + 123.0, values + 123.0, s2, 3e-4);
	EXPECT_LT(max_abs(shifted.advantage - base.advantage), 1e-9);

	// doubling returns and values doubles the range, so normalised advantages are unchanged
	ReturnScale s3;
	s3.update(returns * 2.0);
	auto doubled = actor_loss(log_probs, entropy, returns * 2.0, values * 2.0, s3, 3e-4);
	EXPECT_LT(max_abs(doubled.advantage - base.advantage), 1e-9);
	EXPECT_EQ(doubled.advantage.argmax().item<int64_t>(), base.advantage.argmax().item<int64_t>());
}

TEST(ActorLoss, EntropySignAndGradientAudit)
{
	torch::manual_seed(8);
	auto c = tiny_behavior();
	c.action_size = 4;
	Actor actor(c);
	auto gen = generator(8);
	auto features = torch::randn({16, c.feature_size}, gen);
	auto actions = actor->sample(actor->forward(features), gen);
	auto values = torch::zeros({16});
	ReturnScale scale;

	auto gradient = [&](double coeff, const torch::Tensor& returns) {
		actor->zero_grad();
		auto probs = actor->forward(features);
		auto log_probs = (torch::log(probs) * actions).sum(-1);
		auto entropy = categorical_entropy(probs);
		auto out = actor_loss(log_probs, entropy, returns, values, scale, coeff);
		out.loss.backward();
		std::vector<torch::Tensor> grads;
		for (const auto& p : actor->parameters())
		{
			grads.push_back(p.grad().clone());
		}
		return grads;
	};
	// with zero advantage and no entropy bonus nothing moves
	for (const auto& g : gradient(0.0, values))
	{
		EXPECT_EQ(max_abs(g), 0.0);
	}
	// a gradient step on the entropy-only loss increases entropy
	auto grads = gradient(1.0, values);
	const double before = categorical_entropy(actor->forward(features)).mean().item<double>();
	{
		torch::NoGradGuard no_grad;
		auto params = actor->parameters();
		for (size_t i = 0; i < params.size(); ++i)
		{
			params[i].sub_(grads[i] * 1e-2);
		}
	}
	EXPECT_GT(categorical_entropy(actor->forward(features)).mean().item<double>(), before);
}

TEST(ActorLoss, UniformPolicyMaximisesEntropy)
{
	auto uniform = torch::full({1, 4}, 0.25);
	auto skewed = torch::tensor({{0.4, 0.3, 0.2, 0.1}});
	EXPECT_NEAR(categorical_entropy(uniform).item<double>(), std::log(4.0), 1e-6);
	EXPECT_LT(categorical_entropy(skewed).item<double>(), categorical_entropy(uniform).item<double>());
}

TEST(HeadsLoss, ContinueAndRewardTargets)
{
	auto codec = TwohotCodec::symexp_spaced(41, 20.0);
	auto reward_logits = torch::zeros({1, 41}, torch::kFloat64);
	auto cont_logits = torch::tensor({0.3}, torch::kFloat64);
	auto out = heads_loss(reward_logits, cont_logits, torch::zeros({1}, torch::kFloat64),
		torch::ones({1}, torch::kFloat64), codec, 0.01);
	const double p = 1.0 / (1.0 + std::exp(-0.3));
	EXPECT_NEAR(out.cont.item<double>(), -std::log(p), 1e-12);
	// reward 0 lands entirely on the centre bin; uniform logits give -ln(1/41)
	auto target = codec.encode(0.0);
	EXPECT_DOUBLE_EQ(target[20], 1.0);
	EXPECT_NEAR(out.reward.item<double>(), std::log(41.0), 1e-12);
}

TEST(HeadsLoss, FiniteDifferenceOnTinyHeads)
{
	torch::manual_seed(9);
	auto c = tiny_behavior(6);
	c.bins = 5;
	c.twohot_limit = 3.0;
	TwohotHead reward(c);
	ContinueHead cont(c);
	reward->to(torch::kFloat64);
	cont->to(torch::kFloat64);
	{
		// the reward head starts with a zero output layer; give it a generic point
		torch::NoGradGuard no_grad;
		for (auto& p : reward->parameters())
		{
			p.add_(torch::randn_like(p) * 0.1);
		}
	}
	auto gen = generator(9);
	auto features = torch::randn({3, 6}, gen, torch::kFloat64);
	auto rewards = torch::tensor({0.5, -1.0, 2.0}, torch::kFloat64);
	auto continues = torch::tensor({1.0, 0.0, 1.0}, torch::kFloat64);
	auto total = [&](const torch::Tensor& f) {
		auto out = heads_loss(reward->forward(f), cont->forward(f), rewards, continues, reward->codec(), 0.01);
		return (out.reward + out.cont).sum();
	};
	auto probe = features.clone().set_requires_grad(true);
	total(probe).backward();
	const double eps = 1e-6;
	for (int64_t i = 0; i < features.numel(); ++i)
	{
		auto plus = features.clone();
		auto minus = features.clone();
		plus.view(-1)[i] += eps;
		minus.view(-1)[i] -= eps;
		torch::NoGradGuard no_grad;
		const double numeric = (total(plus).item<double>() - total(minus).item<double>()) / (2.0 * eps);
		EXPECT_NEAR(probe.grad().view(-1)[i].item<double>(), numeric, 1e-5 * std::max(1.0, std::abs(numeric)));
	}
}

TEST(WorldModelLosses, FreeBitsStopGradientsAndPerfectReconstruction)
{
	auto gen = generator(10);
	auto logits = torch::randn({2, 4, 5}, gen, torch::kFloat64);
	auto post_logits = logits.clone().set_requires_grad(true);
	auto prior_logits = logits.clone().set_requires_grad(true);
	PosteriorPriorPair same{
		unimix(torch::softmax(post_logits, -1), 0.01), unimix(torch::softmax(prior_logits, -1), 0.01), {}};
	auto image = torch::rand({2, 3, 4, 4}, gen, torch::kFloat64);
	Reconstruction recon{image.clone().set_requires_grad(true), {}};
	auto losses = world_model_losses(same, recon, Reconstruction{image, {}}, 1.0);
	EXPECT_LT(max_abs(losses.dyn - 1.0), 1e-12);
	EXPECT_LT(max_abs(losses.rep - 1.0), 1e-12);
	EXPECT_EQ(max_abs(losses.rec), 0.0);
	(losses.dyn + losses.rep).sum().backward();
	EXPECT_EQ(max_abs(post_logits.grad()), 0.0);
	EXPECT_EQ(max_abs(prior_logits.grad()), 0.0);

	// above the floor: dyn only trains the prior, rep only trains the posterior
	auto far_post = (torch::randn({2, 4, 5}, gen, torch::kFloat64) * 5.0).set_requires_grad(true);
	auto far_prior = (torch::randn({2, 4, 5}, gen, torch::kFloat64) * 5.0).set_requires_grad(true);
	PosteriorPriorPair apart{
		unimix(torch::softmax(far_post, -1), 0.01), unimix(torch::softmax(far_prior, -1), 0.01), {}};
	auto kl = kl_losses(apart.posterior_probs, apart.prior_probs, 1.0);
	ASSERT_GT(kl.kl.min().item<double>(), 1.0);
	kl.dyn.sum().backward({}, /*retain_graph=*/true);
	EXPECT_FALSE(far_post.grad().defined() && max_abs(far_post.grad()) > 0.0);
	EXPECT_GT(max_abs(far_prior.grad()), 0.0);
	far_prior.grad().zero_();
	kl.rep.sum().backward();
	EXPECT_GT(max_abs(far_post.grad()), 0.0);
	EXPECT_EQ(max_abs(far_prior.grad()), 0.0);
}

TEST(WorldModelLosses, ResidualHeadAddsToReconstruction)
{
	auto gen = generator(11);
	auto raw = torch::rand({2, 3, 4, 4}, gen);
	auto residual = torch::randn({2, 3, 4, 4}, gen);
	auto probs = torch::full({2, 2, 2}, 0.5);
	PosteriorPriorPair latent{probs, probs, {}};
	Reconstruction recon{torch::zeros_like(raw), torch::zeros_like(residual)};
	auto losses = world_model_losses(latent, recon, Reconstruction{raw, residual});
	auto expected = raw.square().flatten(1).sum(-1) + residual.square().flatten(1).sum(-1);
	EXPECT_LT(max_abs(losses.rec - expected), 1e-5);
	EXPECT_THROW(world_model_losses(latent, Reconstruction{recon.raw, {}}, Reconstruction{raw, residual}), ContractError);
}

TEST(SlowCritic, UpdateRules)
{
	auto gen = generator(12);
	auto fast = std::vector<torch::Tensor>{torch::randn({3, 4}, gen), torch::randn({5}, gen)};
	auto make_slow = [&]() { return std::vector<torch::Tensor>{torch::randn({3, 4}, gen), torch::randn({5}, gen)}; };

	auto slow = make_slow();
	slow_critic_update(fast, slow, 1.0);
	EXPECT_TRUE(torch::equal(slow[0], fast[0]));

	slow = make_slow();
	auto copy = std::vector<torch::Tensor>{slow[0].clone(), slow[1].clone()};
	slow_critic_update(fast, slow, 0.0);
	EXPECT_TRUE(torch::equal(slow[1], copy[1]));

	auto twice = std::vector<torch::Tensor>{copy[0].clone(), copy[1].clone()};
	slow_critic_update(fast, twice, 0.02);
	slow_critic_update(fast, twice, 0.02);
	auto once = std::vector<torch::Tensor>{copy[0].clone(), copy[1].clone()};
	slow_critic_update(fast, once, 1.0 - 0.98 * 0.98);
	EXPECT_LT(max_abs(twice[0] - once[0]), 1e-6);
	EXPECT_LT(max_abs(twice[1] - once[1]), 1e-6);

	std::vector<torch::Tensor> wrong{torch::zeros({2})};
	EXPECT_THROW(slow_critic_update(fast, wrong, 0.02), ContractError);
}

} // namespace
} // namespace resdreamer
