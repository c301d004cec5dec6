#pragma once

#include "resdreamer/agent.h"
#include "resdreamer/checkpoint.h"
#include "resdreamer/config.h"
#include "resdreamer/envs.h"
#include "resdreamer/replay.h"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <vector>

namespace resdreamer
{

/// A loss became NaN or infinite; `diagnostics` holds the metrics of the failing step.
class NonFiniteLossError : public std::runtime_error
{
public:
	NonFiniteLossError(const std::string& what, nlohmann::json diagnostics);
	const nlohmann::json& diagnostics() const { return diagnostics_; }

private:
	nlohmann::json diagnostics_;
};

/// Replay images [B, T, H, W, 3] bytes -> [B, T, 3, H, W] floats in [-0.5, 0.5].
torch::Tensor images_to_input(const torch::Tensor& images);

/// Loss terms of one training step, before any optimiser update.
struct TrainLosses
{
	torch::Tensor world;
	torch::Tensor heads;
	torch::Tensor actor;
	torch::Tensor critic;
	torch::Tensor replay_value;
	torch::Tensor total;
	/// Per-step behavior features of the replayed chunk, [B, T, F] (graph attached).
	torch::Tensor replay_features;
	/// State after the last replayed step, one entry per layer.
	std::vector<LayerState> final_state;
	std::vector<EmaNormalizer> normalizers;
	nlohmann::json metrics;
};

/// Steps (2) to (5) of a training step on an already sampled chunk. Normalizer updates are returned, not applied.
TrainLosses compute_losses(
	AgentImpl& agent, const ReplayChunk& chunk, const TrainConfig& config, RunState& run, const CarriedStateStore* carried);

/// Samples a chunk, computes all losses, steps every optimiser, updates the slow critic and stores carried states.
nlohmann::json train_step(AgentImpl& agent, Optimizers& optimizers, ReplayBuffer& buffer, const TrainConfig& config, RunState& run);

struct EpisodeSummary
{
	int64_t episode = 0;
	double score = 0.0;
	int64_t length = 0;
	bool success = false; // survived to truncation
};

/// Seed of the e-th episode of a stream.
uint64_t episode_seed(uint64_t base, int64_t episode);

/// Drives one environment, one appended step per call.
class Collector
{
public:
	Collector(const TrainConfig& config, uint64_t seed_base);

	/// Observes the pending step with `policy` (eval-mode normalizers), appends it and acts. A null policy acts
	/// uniformly at random without running the world model. Returns the summary when an episode ends.
	std::optional<EpisodeSummary> step(AgentImpl* policy, ReplayBuffer& buffer, at::Generator& generator, int64_t& episodes);

	const HierState& state() const { return state_; }
	const Environment& env() const { return *env_; }

	/// Called after every world-model observe with the result and the observed environment step.
	std::function<void(const ObserveResult&, const EnvStep&, int64_t episode, int64_t step)> on_observe;

private:
	void begin_episode(int64_t episode);

	TrainConfig config_;
	uint64_t seed_base_;
	std::unique_ptr<Environment> env_;
	std::optional<EnvStep> pending_;
	int pending_action_ = 0;
	bool state_valid_ = false;
	HierState state_;
	int64_t episode_ = 0;
	double score_ = 0.0;
	int64_t length_ = 0;
	std::vector<StepRecord> staged_;
	bool stage_episodes_ = false;
};

struct EvalSummary
{
	int episodes = 0;
	double success_rate = 0.0;
	double mean_score = 0.0;
	double mean_length = 0.0;
	std::vector<EpisodeSummary> per_episode;

	nlohmann::json to_json() const;
};

struct EvalHooks
{
	/// Receives every evaluated step when set; otherwise steps go to a scratch buffer.
	ReplayBuffer* record = nullptr;
	std::function<void(const ObserveResult&, const EnvStep&, int64_t episode, int64_t step)> on_observe;
};

/// Frozen-parameter episodes; a null agent plays uniformly at random. Deterministic per seed.
EvalSummary evaluate(AgentImpl* agent, const TrainConfig& config, int episodes, uint64_t seed, const EvalHooks& hooks = {});

/// Append-only JSON-lines writer, safe to share between threads.
class MetricsWriter
{
public:
	MetricsWriter(const std::filesystem::path& path, bool wallclock);
	void write(nlohmann::json record);

private:
	std::mutex mutex_;
	std::ofstream out_;
	bool wallclock_;
	std::chrono::steady_clock::time_point start_;
};

struct RunOptions
{
	std::filesystem::path logdir;
	bool resume = false;
	/// Abandons the run without a final checkpoint once this many env steps exist (simulated kill).
	int64_t abort_at_env_step = -1;
};

struct RunSummary
{
	int64_t env_steps = 0;
	int64_t train_steps = 0;
	int64_t episodes = 0;
	std::vector<std::filesystem::path> checkpoints;
	std::optional<EvalSummary> last_eval;
	bool aborted = false;

	nlohmann::json to_json() const;
};

/// Collector and trainer until the env-step budget, with checkpoints, evals and metrics under the logdir.
RunSummary run(const TrainConfig& config, const RunOptions& options);

} // namespace resdreamer
