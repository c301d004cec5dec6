#pragma once

#include "resdreamer/agent.h"
#include "resdreamer/config.h"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>

namespace resdreamer
{

inline constexpr int kCheckpointFormatVersion = 1;

/// Counters and random streams of a run; everything needed besides parameters to continue it.
struct RunState
{
	int64_t env_steps = 0;
	int64_t train_steps = 0;
	int64_t episodes = 0;
	std::mt19937_64 replay_rng;
	at::Generator train_generator;
	at::Generator collect_generator;

	explicit RunState(uint64_t seed = 0);
};

/// Writes `dir` (normally `<logdir>/ckpt/<step>`): manifest.json, params.bin, optim.bin, state.bin.
void save_checkpoint(
	const std::filesystem::path& dir,
	const TrainConfig& config,
	const AgentImpl& agent,
	const Optimizers* optimizers,
	const RunState& run);

/// Reads manifest.json and checks format and version.
nlohmann::json read_manifest(const std::filesystem::path& dir);
TrainConfig checkpoint_config(const std::filesystem::path& dir);

/// Restores parameters and statistics, and optionally optimiser moments and run state.
void load_checkpoint(const std::filesystem::path& dir, AgentImpl& agent, Optimizers* optimizers, RunState* run);

/// Highest numbered `<logdir>/ckpt/<step>` directory holding a manifest.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& logdir);

} // namespace resdreamer
