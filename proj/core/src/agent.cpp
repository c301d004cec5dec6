#include "resdreamer/agent.h"

#include "resdreamer/errors.h"

namespace resdreamer
{

AgentImpl::AgentImpl(const HrssmConfig& world_config, const BehaviorConfig& behavior_config)
		: return_scale(0.99), world_config_(world_config), behavior_config_(behavior_config)
{
	world_config_.validate();
	behavior_config_.validate();
	world = register_module("world", Hrssm(world_config_));
	actor = register_module("actor", Actor(behavior_config_));
	critic = register_module("critic", TwohotHead(behavior_config_));
	slow_critic = register_module("slow_critic", TwohotHead(behavior_config_));
	reward = register_module("reward", TwohotHead(behavior_config_));
	cont = register_module("cont", ContinueHead(behavior_config_));

	torch::NoGradGuard no_grad;
	auto fast = critic->parameters();
	auto slow = slow_critic->parameters();
	for (size_t i = 0; i < fast.size(); ++i)
	{
		slow[i].copy_(fast[i]);
		slow[i].set_requires_grad(false);
	}
	for (int k = 1; k < world_config_.layers; ++k)
	{
		normalizers.emplace_back(3, world_config_.normalizer_decay, world_config_.normalizer_floor);
	}
}

HierState AgentImpl::initial_state(int64_t batch) const
{
	auto state = world->initial_state(batch);
	state.normalizers = normalizers;
	return state;
}

torch::Tensor AgentImpl::features(std::span<const LayerState> layers) const
{
	return behavior_features(layers, behavior_config_.stacked_state_heads);
}

void AgentImpl::copy_from(const AgentImpl& other)
{
	torch::NoGradGuard no_grad;
	auto dst = named_parameters(true);
	auto src = other.named_parameters(true);
	expects(dst.size() == src.size(), "copy_from: parameter count mismatch");
	for (const auto& item : src)
	{
		auto* target = dst.find(item.key());
		expects(target != nullptr, "copy_from: missing parameter " + item.key());
		target->copy_(item.value());
	}
	auto dst_buffers = named_buffers(true);
	for (const auto& item : other.named_buffers(true))
	{
		auto* target = dst_buffers.find(item.key());
		expects(target != nullptr, "copy_from: missing buffer " + item.key());
		target->copy_(item.value());
	}
	normalizers = other.normalizers;
	return_scale = other.return_scale;
}

std::shared_ptr<AgentImpl> AgentImpl::clone_snapshot() const
{
	auto copy = std::make_shared<AgentImpl>(world_config_, behavior_config_);
	copy->copy_from(*this);
	copy->eval();
	return copy;
}

ActionProvider AgentImpl::actor_actions(at::Generator& generator, bool mode)
{
	return [this, &generator, mode](std::span<const LayerState> layers) {
		auto probs = actor->forward(features(layers));
		return mode ? actor->mode(probs) : actor->sample(probs, generator);
	};
}

ActionProvider AgentImpl::hint_actions(HintActions source, at::Generator& generator)
{
	switch (source)
	{
	case HintActions::kActorSample:
		return actor_actions(generator, false);
	case HintActions::kActorMode:
		return actor_actions(generator, true);
	case HintActions::kUniform:
		return [this, &generator](std::span<const LayerState> layers) {
			const auto batch = layers[0].h.size(0);
			auto probs = torch::full({batch, actor->action_size()}, 1.0 / actor->action_size(), layers[0].h.options());
			return actor->sample(probs, generator);
		};
	}
	throw ContractError("hint_actions: unknown source");
}

std::vector<torch::Tensor> AgentImpl::world_group(int layer) const
{
	auto params = world->layer(layer)->parameters();
	if (layer == 0)
	{
		for (const auto& p : reward->parameters())
		{
			params.push_back(p);
		}
		for (const auto& p : cont->parameters())
		{
			params.push_back(p);
		}
	}
	return params;
}

Agent make_agent(const TrainConfig& config)
{
	torch::manual_seed(config.seed);
	Agent agent(config.hrssm, config.behavior);
	agent->return_scale = ReturnScale(config.actor_critic.return_decay);
	return agent;
}

void Optimizers::zero_grad()
{
	for (auto& g : groups)
	{
		g->zero_grad();
	}
}

std::vector<double> Optimizers::step()
{
	std::vector<double> norms;
	for (auto& g : groups)
	{
		std::vector<torch::Tensor> params;
		for (const auto& group : g->param_groups())
		{
			for (const auto& p : group.params())
			{
				params.push_back(p);
			}
		}
		norms.push_back(torch::nn::utils::clip_grad_norm_(params, grad_clip));
		g->step();
	}
	return norms;
}

Optimizers make_optimizers(AgentImpl& agent, double learning_rate, double eps, double grad_clip)
{
	Optimizers out;
	out.grad_clip = grad_clip;
	auto options = torch::optim::AdamOptions(learning_rate).eps(eps);
	for (int k = 0; k < agent.world_config().layers; ++k)
	{
		out.names.push_back("world" + std::to_string(k));
		out.groups.push_back(std::make_unique<torch::optim::Adam>(agent.world_group(k), options));
	}
	out.names.push_back("actor");
	out.groups.push_back(std::make_unique<torch::optim::Adam>(agent.actor->parameters(), options));
	out.names.push_back("critic");
	out.groups.push_back(std::make_unique<torch::optim::Adam>(agent.critic->parameters(), options));
	return out;
}

} // namespace resdreamer
