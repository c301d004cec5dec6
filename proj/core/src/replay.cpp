#include "resdreamer/replay.h"

#include "resdreamer/blob.h"
#include "resdreamer/errors.h"

#include <algorithm>
#include <cstring>
#include <regex>

namespace resdreamer
{

namespace
{
const std::string kReplayFormat = "resdreamer.replay";

std::vector<std::pair<uint64_t, std::filesystem::path>> chunk_files(const std::filesystem::path& dir)
{
	std::vector<std::pair<uint64_t, std::filesystem::path>> files;
	if (!std::filesystem::is_directory(dir))
	{
		return files;
	}
	static const std::regex pattern(R"((\d+)\.bin)");
	for (const auto& entry : std::filesystem::directory_iterator(dir))
	{
		std::smatch match;
		const auto name = entry.path().filename().string();
		if (entry.is_regular_file() && std::regex_match(name, match, pattern))
		{
			files.emplace_back(std::stoull(match[1].str()), entry.path());
		}
	}
	std::sort(files.begin(), files.end());
	return files;
}

template <typename T>
const T* typed(const BlobArray& a, const std::string& dtype, int64_t count)
{
	if (a.dtype != dtype || a.elements() != count)
	{
		throw FormatError("replay chunk: array '" + a.name + "' has unexpected dtype or size");
	}
	return reinterpret_cast<const T*>(a.bytes.data());
}

std::vector<StepRecord> decode_chunk(const Blob& blob, int& height, int& width)
{
	const auto count = blob.meta.at("count").get<int64_t>();
	const auto& image = blob.array("image");
	if (image.dtype != "uint8" || image.shape.size() != 4 || image.shape[0] != count || image.shape[3] != 3)
	{
		throw FormatError("replay chunk: malformed image array");
	}
	height = static_cast<int>(image.shape[1]);
	width = static_cast<int>(image.shape[2]);
	const size_t pixels = static_cast<size_t>(height) * width * 3;
	auto action = typed<int32_t>(blob.array("action"), "int32", count);
	auto reward = typed<float>(blob.array("reward"), "float32", count);
	auto first = typed<uint8_t>(blob.array("is_first"), "uint8", count);
	auto last = typed<uint8_t>(blob.array("is_last"), "uint8", count);
	auto terminal = typed<uint8_t>(blob.array("is_terminal"), "uint8", count);
	auto cont = typed<float>(blob.array("continuation"), "float32", count);
	std::vector<StepRecord> steps(count);
	for (int64_t i = 0; i < count; ++i)
	{
		auto& s = steps[i];
		s.image.assign(image.bytes.begin() + i * pixels, image.bytes.begin() + (i + 1) * pixels);
		s.action = action[i];
		s.reward = reward[i];
		s.is_first = first[i] != 0;
		s.is_last = last[i] != 0;
		s.is_terminal = terminal[i] != 0;
		s.continuation = cont[i];
	}
	return steps;
}
} // namespace

void CarriedStateStore::store(uint64_t key, const std::vector<LayerState>& state)
{
	std::vector<LayerState> copy;
	copy.reserve(state.size());
	for (const auto& s : state)
	{
		copy.push_back({s.h.detach().clone(), s.z.detach().clone()});
	}
	std::lock_guard lock(mutex_);
	states_[key] = std::move(copy);
}

std::optional<std::vector<LayerState>> CarriedStateStore::fetch(uint64_t key) const
{
	std::lock_guard lock(mutex_);
	auto it = states_.find(key);
	if (it == states_.end())
	{
		return std::nullopt;
	}
	return it->second;
}

std::vector<LayerState> CarriedStateStore::fetch_or(uint64_t key, const std::vector<LayerState>& zero) const
{
	auto found = fetch(key);
	return found ? *found : zero;
}

void CarriedStateStore::evict_before(uint64_t key)
{
	std::lock_guard lock(mutex_);
	states_.erase(states_.begin(), states_.lower_bound(key));
}

size_t CarriedStateStore::size() const
{
	std::lock_guard lock(mutex_);
	return states_.size();
}

ReplayBuffer::ReplayBuffer(size_t capacity, int height, int width) : capacity_(capacity), height_(height), width_(width)
{
	expects(capacity > 0, "replay: capacity must be positive");
	expects(height > 0 && width > 0, "replay: image size must be positive");
}

void ReplayBuffer::append(StepRecord step)
{
	std::lock_guard lock(mutex_);
	append_locked(std::move(step));
}

void ReplayBuffer::append_locked(StepRecord step)
{
	expects(step.image.size() == static_cast<size_t>(height_) * width_ * 3, "replay: image size mismatch");
	if (steps_.empty() || steps_.back().is_terminal || steps_.back().is_last)
	{
		step.is_first = true;
	}
	if (step.is_terminal)
	{
		step.is_last = true;
	}
	step.continuation = step.is_terminal ? 0.0F : 1.0F;
	steps_.push_back(std::move(step));
	if (steps_.size() > capacity_)
	{
		steps_.pop_front();
		++begin_;
		carried_.evict_before(begin_);
	}
}

size_t ReplayBuffer::size() const
{
	std::lock_guard lock(mutex_);
	return steps_.size();
}

uint64_t ReplayBuffer::begin_index() const
{
	std::lock_guard lock(mutex_);
	return begin_;
}

uint64_t ReplayBuffer::end_index() const
{
	std::lock_guard lock(mutex_);
	return begin_ + steps_.size();
}

StepRecord ReplayBuffer::at(uint64_t global_index) const
{
	std::lock_guard lock(mutex_);
	expects(global_index >= begin_ && global_index < begin_ + steps_.size(), "replay: index out of range");
	return steps_[global_index - begin_];
}

ReplayChunk ReplayBuffer::sample(int batch, int length, std::mt19937_64& rng) const
{
	expects(batch > 0 && length > 0, "replay sample: batch and length must be positive");
	std::lock_guard lock(mutex_);
	if (steps_.size() < static_cast<size_t>(length))
	{
		throw InsufficientDataError(
			"replay holds " + std::to_string(steps_.size()) + " steps, " + std::to_string(length) + " required");
	}
	std::uniform_int_distribution<uint64_t> offset(0, steps_.size() - static_cast<size_t>(length));
	std::vector<uint64_t> starts(batch);
	for (auto& s : starts)
	{
		s = begin_ + offset(rng);
	}
	return read_locked(starts, length);
}

ReplayChunk ReplayBuffer::read(std::span<const uint64_t> starts, int length) const
{
	std::lock_guard lock(mutex_);
	return read_locked(starts, length);
}

ReplayChunk ReplayBuffer::read_locked(std::span<const uint64_t> starts, int length) const
{
	const auto batch = static_cast<int64_t>(starts.size());
	const size_t pixels = static_cast<size_t>(height_) * width_ * 3;
	ReplayChunk chunk;
	chunk.images = torch::empty({batch, length, height_, width_, 3}, torch::kUInt8);
	chunk.actions = torch::empty({batch, length}, torch::kInt64);
	chunk.rewards = torch::empty({batch, length}, torch::kFloat32);
	chunk.is_first = torch::empty({batch, length}, torch::kFloat32);
	chunk.is_last = torch::empty({batch, length}, torch::kFloat32);
	chunk.is_terminal = torch::empty({batch, length}, torch::kFloat32);
	chunk.continuation = torch::empty({batch, length}, torch::kFloat32);
	auto images = chunk.images.data_ptr<uint8_t>();
	auto actions = chunk.actions.data_ptr<int64_t>();
	auto rewards = chunk.rewards.data_ptr<float>();
	auto first = chunk.is_first.data_ptr<float>();
	auto last = chunk.is_last.data_ptr<float>();
	auto terminal = chunk.is_terminal.data_ptr<float>();
	auto cont = chunk.continuation.data_ptr<float>();
	for (int64_t b = 0; b < batch; ++b)
	{
		const uint64_t start = starts[b];
		expects(start >= begin_ && start + length <= begin_ + steps_.size(), "replay read: sequence out of range");
		chunk.start_index.push_back(start);
		for (int t = 0; t < length; ++t)
		{
			const auto& s = steps_[start - begin_ + t];
			const int64_t i = b * length + t;
			std::memcpy(images + i * pixels, s.image.data(), pixels);
			actions[i] = s.action;
			rewards[i] = s.reward;
			first[i] = s.is_first ? 1.0F : 0.0F;
			last[i] = s.is_last ? 1.0F : 0.0F;
			terminal[i] = s.is_terminal ? 1.0F : 0.0F;
			cont[i] = s.continuation;
		}
	}
	return chunk;
}

void ReplayBuffer::save(const std::filesystem::path& dir) const
{
	std::lock_guard lock(mutex_);
	std::filesystem::create_directories(dir);
	for (const auto& [index, path] : chunk_files(dir))
	{
		std::filesystem::remove(path);
	}

	const size_t pixels = static_cast<size_t>(height_) * width_ * 3;
	for (size_t offset = 0, index = 0; offset < steps_.size(); offset += kReplayChunkSteps, ++index)
	{
		const size_t count = std::min(kReplayChunkSteps, steps_.size() - offset);
		const auto n = static_cast<int64_t>(count);
		BlobArray image{"image", "uint8", {n, height_, width_, 3}, std::vector<uint8_t>(count * pixels)};
		BlobArray action{"action", "int32", {n}, std::vector<uint8_t>(count * 4)};
		BlobArray reward{"reward", "float32", {n}, std::vector<uint8_t>(count * 4)};
		BlobArray first{"is_first", "uint8", {n}, std::vector<uint8_t>(count)};
		BlobArray last{"is_last", "uint8", {n}, std::vector<uint8_t>(count)};
		BlobArray terminal{"is_terminal", "uint8", {n}, std::vector<uint8_t>(count)};
		BlobArray cont{"continuation", "float32", {n}, std::vector<uint8_t>(count * 4)};
		for (size_t i = 0; i < count; ++i)
		{
			const auto& s = steps_[offset + i];
			std::memcpy(image.bytes.data() + i * pixels, s.image.data(), pixels);
			std::memcpy(action.bytes.data() + i * 4, &s.action, 4);
			std::memcpy(reward.bytes.data() + i * 4, &s.reward, 4);
			first.bytes[i] = s.is_first ? 1 : 0;
			last.bytes[i] = s.is_last ? 1 : 0;
			terminal.bytes[i] = s.is_terminal ? 1 : 0;
			std::memcpy(cont.bytes.data() + i * 4, &s.continuation, 4);
		}
		Blob blob;
		blob.meta = {{"count", n}, {"first_index", begin_ + offset}};
		blob.arrays = {image, action, reward, first, last, terminal, cont};
		write_blob(dir / (std::to_string(index) + ".bin"), kReplayFormat, kReplayFormatVersion, blob);
	}
}

std::unique_ptr<ReplayBuffer> ReplayBuffer::load(const std::filesystem::path& dir, size_t capacity)
{
	auto files = chunk_files(dir);
	if (files.empty())
	{
		throw FormatError("replay load: no chunk files in " + dir.string());
	}
	std::vector<StepRecord> steps;
	uint64_t first_index = 0;
	int height = 0;
	int width = 0;
	for (size_t i = 0; i < files.size(); ++i)
	{
		auto blob = read_blob(files[i].second, kReplayFormat, kReplayFormatVersion);
		if (!blob.meta.contains("count") || !blob.meta.contains("first_index"))
		{
			throw FormatError("replay load: header lacks count/first_index in " + files[i].second.string());
		}
		int h = 0;
		int w = 0;
		auto chunk = decode_chunk(blob, h, w);
		const auto index = blob.meta["first_index"].get<uint64_t>();
		if (i == 0)
		{
			first_index = index;
			height = h;
			width = w;
		}
		else if (index != first_index + steps.size() || h != height || w != width)
		{
			throw FormatError("replay load: chunk " + files[i].second.string() + " is not contiguous");
		}
		steps.insert(steps.end(), std::make_move_iterator(chunk.begin()), std::make_move_iterator(chunk.end()));
	}
	auto buffer = std::make_unique<ReplayBuffer>(capacity, height, width);
	const size_t skip = steps.size() > capacity ? steps.size() - capacity : 0;
	buffer->begin_ = first_index + skip;
	for (size_t i = skip; i < steps.size(); ++i)
	{
		buffer->steps_.push_back(std::move(steps[i]));
	}
	return buffer;
}

ReplayInspection inspect_replay_dir(const std::filesystem::path& dir)
{
	ReplayInspection report;
	for (const auto& [index, path] : chunk_files(dir))
	{
		ReplayInspection::File file;
		file.name = path.filename().string();
		try
		{
			auto blob = read_blob(path, kReplayFormat, kReplayFormatVersion);
			int h = 0;
			int w = 0;
			auto steps = decode_chunk(blob, h, w);
			file.ok = true;
			file.version = kReplayFormatVersion;
			file.steps = static_cast<int64_t>(steps.size());
			report.chunks += 1;
			report.steps += file.steps;
			for (const auto& s : steps)
			{
				report.episodes_started += s.is_first ? 1 : 0;
				report.terminals += s.is_terminal ? 1 : 0;
				report.truncations += (s.is_last && !s.is_terminal) ? 1 : 0;
				report.reward_sum += s.reward;
			}
		}
		catch (const std::exception& e)
		{
			file.ok = false;
			file.error = e.what();
			report.corrupt += 1;
		}
		report.files.push_back(std::move(file));
	}
	return report;
}

} // namespace resdreamer
