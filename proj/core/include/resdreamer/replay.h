#pragma once

#include "resdreamer/ppb.h"

#include <torch/torch.h>

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace resdreamer
{

inline constexpr int kReplayFormatVersion = 1;
inline constexpr size_t kReplayChunkSteps = 1024;

struct StepRecord
{
	std::vector<uint8_t> image; // HWC, 3 channels
	int32_t action = 0;					// action that led to this observation; ignored when is_first
	float reward = 0.0F;
	bool is_first = false;
	bool is_last = false;
	bool is_terminal = false;
	float continuation = 1.0F; // 0 iff is_terminal

	bool operator==(const StepRecord&) const = default;
};

/// B sequences of T contiguous steps.
struct ReplayChunk
{
	torch::Tensor images;				// uint8 [B, T, H, W, 3]
	torch::Tensor actions;			// int64 [B, T]
	torch::Tensor rewards;			// float32 [B, T]
	torch::Tensor is_first;			// float32 [B, T]
	torch::Tensor is_last;			// float32 [B, T]
	torch::Tensor is_terminal;	// float32 [B, T]
	torch::Tensor continuation; // float32 [B, T]
	std::vector<uint64_t> start_index;
};

/// Latent states carried across chunk boundaries, keyed by the global step index they start from.
class CarriedStateStore
{
public:
	/// `state` holds single-row layer states; tensors are detached and cloned.
	void store(uint64_t key, const std::vector<LayerState>& state);
	std::optional<std::vector<LayerState>> fetch(uint64_t key) const;
	std::vector<LayerState> fetch_or(uint64_t key, const std::vector<LayerState>& zero) const;
	void evict_before(uint64_t key);
	size_t size() const;

private:
	mutable std::mutex mutex_;
	std::map<uint64_t, std::vector<LayerState>> states_;
};

/// FIFO sequence replay with global step indices. Append and sample may run on different threads.
class ReplayBuffer
{
public:
	ReplayBuffer(size_t capacity, int height, int width);

	void append(StepRecord step);

	size_t size() const;
	size_t capacity() const { return capacity_; }
	int height() const { return height_; }
	int width() const { return width_; }
	/// Global index of the oldest retained step.
	uint64_t begin_index() const;
	/// One past the newest step.
	uint64_t end_index() const;
	StepRecord at(uint64_t global_index) const;

	/// Uniform start offsets; throws InsufficientDataError when fewer than `length` steps are held.
	ReplayChunk sample(int batch, int length, std::mt19937_64& rng) const;
	ReplayChunk read(std::span<const uint64_t> starts, int length) const;

	/// Writes `<dir>/<chunk_index>.bin` files of kReplayChunkSteps steps each.
	void save(const std::filesystem::path& dir) const;
	static std::unique_ptr<ReplayBuffer> load(const std::filesystem::path& dir, size_t capacity);

	CarriedStateStore& carried_states() { return carried_; }
	const CarriedStateStore& carried_states() const { return carried_; }

private:
	ReplayChunk read_locked(std::span<const uint64_t> starts, int length) const;
	void append_locked(StepRecord step);

	size_t capacity_;
	int height_;
	int width_;
	mutable std::mutex mutex_;
	std::deque<StepRecord> steps_;
	uint64_t begin_ = 0;
	CarriedStateStore carried_;
};

struct ReplayInspection
{
	struct File
	{
		std::string name;
		bool ok = false;
		std::string error;
		int64_t steps = 0;
		int version = 0;
	};
	std::vector<File> files;
	int64_t chunks = 0;
	int64_t steps = 0;
	int64_t episodes_started = 0;
	int64_t terminals = 0;
	int64_t truncations = 0;
	double reward_sum = 0.0;
	int64_t corrupt = 0;
};

/// Summarises a replay directory without loading it into a buffer; corrupt files are listed, not thrown.
ReplayInspection inspect_replay_dir(const std::filesystem::path& dir);

} // namespace resdreamer
