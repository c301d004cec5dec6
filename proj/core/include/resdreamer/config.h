#pragma once

#include "resdreamer/behavior.h"
#include "resdreamer/envs.h"
#include "resdreamer/hrssm.h"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>

namespace resdreamer
{

/// Source of the actions driving the hint rollouts inside observe.
enum class HintActions
{
	kActorSample,
	kActorMode,
	kUniform,
};

struct EnvConfig
{
	std::string id = "dodgeworld"; // dodgeworld | constant
	int height = 32;
	int width = 32;
	int num_envs = 1;
	DodgeWorldConfig dodge;
	int constant_episode_length = 100;
};

struct LossScales
{
	double rec = 1.0;
	double dyn = 1.0;
	double rep = 0.1;
	double reward = 1.0;
	double cont = 1.0;
	double value = 1.0;
	double replay_value = 0.3;
	double policy = 1.0;
	double slow_reg = 1.0;
};

struct ActorCriticConfig
{
	int imagination_horizon = 15;
	LambdaReturnParams returns;
	double entropy_coeff = 3e-4;
	double slow_critic_rate = 0.02;
	double return_decay = 0.99;
	/// Use every entry_stride-th replayed feature as an imagination start.
	int entry_stride = 1;
};

struct TrainSchedule
{
	int64_t env_steps = 50000;
	int batch_size = 8;
	int batch_length = 32;
	double train_ratio = 32.0;
	int64_t buffer_size = 200000;
	double learning_rate = 4e-5;
	double adam_eps = 1e-8;
	double grad_clip = 1000.0;
	int64_t prefill = 1024;
	bool synchronous = true;
	int64_t checkpoint_every = 10000;
	int64_t eval_every = 0;
	int eval_episodes = 20;
	/// Train steps between parameter snapshot refreshes of the collector.
	int snapshot_every = 1;
	HintActions hint_actions = HintActions::kActorSample;
	bool save_replay = true;
};

struct TrainConfig
{
	uint64_t seed = 0;
	EnvConfig env;
	HrssmConfig hrssm;
	BehaviorConfig behavior;
	ActorCriticConfig actor_critic;
	LossScales loss;
	TrainSchedule train;
	/// The merged JSON the typed fields were read from.
	nlohmann::json source;

	/// Replayed steps per train step divided by the train ratio.
	double env_steps_per_train_step() const;
	void validate() const;
};

/// Every recognised key with its default value.
nlohmann::json default_config_json();

/// Recursively overlays `overlay` on `base`; keys absent from `base` raise ContractError.
void merge_config(nlohmann::json& base, const nlohmann::json& overlay, const std::string& prefix = "");

/// Applies `dotted.key=value`; the value is parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Builds the typed config from a complete JSON document and validates it.
TrainConfig config_from_json(const nlohmann::json& json);

/// Defaults, then the file (if non-empty path), then overrides in order.
TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// FNV-1a over the canonical dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& json);

std::unique_ptr<Environment> make_env(const EnvConfig& config);

} // namespace resdreamer
