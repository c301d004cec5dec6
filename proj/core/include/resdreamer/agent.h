#pragma once

#include "resdreamer/behavior.h"
#include "resdreamer/config.h"
#include "resdreamer/hrssm.h"

#include <torch/torch.h>

#include <memory>
#include <string>
#include <vector>

namespace resdreamer
{

/// World model, behavior heads and the non-parameter statistics that travel with them.
class AgentImpl : public torch::nn::Module
{
public:
	AgentImpl(const HrssmConfig& world_config, const BehaviorConfig& behavior_config);

	const HrssmConfig& world_config() const { return world_config_; }
	const BehaviorConfig& behavior_config() const { return behavior_config_; }

	/// Zero layer states for `batch` rows plus the agent's current normalizers.
	HierState initial_state(int64_t batch) const;
	torch::Tensor features(std::span<const LayerState> layers) const;

	/// Overwrites parameters and statistics with those of `other` (same architecture).
	void copy_from(const AgentImpl& other);
	std::shared_ptr<AgentImpl> clone_snapshot() const;

	/// One-hot actions sampled from the actor (or its mode) given layer states.
	ActionProvider actor_actions(at::Generator& generator, bool mode = false);
	ActionProvider hint_actions(HintActions source, at::Generator& generator);

	/// World-model parameters of layer k; the reward and continue heads join layer 0.
	std::vector<torch::Tensor> world_group(int layer) const;

	Hrssm world{nullptr};
	Actor actor{nullptr};
	TwohotHead critic{nullptr};
	TwohotHead slow_critic{nullptr};
	TwohotHead reward{nullptr};
	ContinueHead cont{nullptr};

	std::vector<EmaNormalizer> normalizers;
	ReturnScale return_scale;

private:
	HrssmConfig world_config_;
	BehaviorConfig behavior_config_;
};
TORCH_MODULE(Agent);

Agent make_agent(const TrainConfig& config);

/// One Adam optimiser per parameter group: world layers 0..L-1, then actor, then critic.
struct Optimizers
{
	std::vector<std::string> names;
	std::vector<std::unique_ptr<torch::optim::Adam>> groups;
	double grad_clip = 1000.0;

	void zero_grad();
	/// Clips each group to `grad_clip` global norm and steps it; returns the pre-clip norms.
	std::vector<double> step();
};

Optimizers make_optimizers(AgentImpl& agent, double learning_rate, double eps, double grad_clip);

} // namespace resdreamer
