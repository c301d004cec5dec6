#include "resdreamer/envs.h"

#include "resdreamer/errors.h"

#include <algorithm>
#include <map>
#include <set>

namespace resdreamer
{

DodgeWorld::DodgeWorld(DodgeWorldConfig config) : config_(config)
{
	expects(config_.rows >= 2 && config_.cols >= 1 && config_.cell_pixels >= 1, "dodgeworld: invalid grid");
	expects(config_.spawn_prob >= 0.0 && config_.spawn_prob <= 1.0, "dodgeworld: spawn_prob must lie in [0,1]");
	expects(config_.telegraph_steps >= 0 && config_.max_steps >= 1, "dodgeworld: invalid timing");
}

double DodgeWorld::uniform()
{
	return static_cast<double>(rng_() >> 11) * 0x1.0p-53;
}

EnvStep DodgeWorld::reset(uint64_t seed)
{
	rng_.seed(seed);
	state_ = DodgeWorldState{};
	state_.agent_col = config_.cols / 2;
	state_.done = false;
	return observe(0.0, true, false, false);
}

EnvStep DodgeWorld::step(int action)
{
	expects(action >= 0 && action < action_count(), "dodgeworld: invalid action " + std::to_string(action));
	expects(!state_.done, "dodgeworld: step after episode end; call reset");

	const int bottom = config_.rows - 1;
	state_.agent_col = std::clamp(state_.agent_col + (action - 1), 0, config_.cols - 1);

	bool hit = false;
	std::vector<Projectile> remaining;
	for (auto p : state_.projectiles)
	{
		if (!p.falling())
		{
			--p.telegraph_left;
			remaining.push_back(p);
			continue;
		}
		++p.row;
		if (p.row >= bottom)
		{
			hit = hit || p.col == state_.agent_col;
			continue;
		}
		remaining.push_back(p);
	}
	state_.projectiles = std::move(remaining);

	if (uniform() < config_.spawn_prob)
	{
		std::vector<int> free;
		for (int c = 0; c < config_.cols; ++c)
		{
			auto occupied = std::any_of(
				state_.projectiles.begin(), state_.projectiles.end(), [c](const Projectile& p) { return p.col == c; });
			if (!occupied)
			{
				free.push_back(c);
			}
		}
		if (!free.empty())
		{
			const auto pick = static_cast<size_t>(rng_() % free.size());
			state_.projectiles.push_back({free[pick], 0, config_.telegraph_steps});
		}
	}

	++state_.step_count;
	const bool truncated = !hit && state_.step_count >= config_.max_steps;
	state_.done = hit || truncated;
	return observe(hit ? config_.hit_reward : config_.survive_reward, false, hit, state_.done);
}

EnvStep DodgeWorld::observe(double reward, bool first, bool terminal, bool last) const
{
	EnvStep out;
	out.image = render();
	out.height = height();
	out.width = width();
	out.reward = reward;
	out.is_first = first;
	out.is_terminal = terminal;
	out.is_last = last;
	return out;
}

std::vector<uint8_t> DodgeWorld::render() const
{
	return render(config_, state_);
}

std::vector<uint8_t> DodgeWorld::render(const DodgeWorldConfig& config, const DodgeWorldState& state)
{
	const int height = config.rows * config.cell_pixels;
	const int width = config.cols * config.cell_pixels;
	std::vector<uint8_t> image(static_cast<size_t>(height) * width * 3, 0);
	auto fill = [&](int row, int col, uint8_t r, uint8_t g, uint8_t b) {
		for (int y = row * config.cell_pixels; y < (row + 1) * config.cell_pixels; ++y)
		{
			for (int x = col * config.cell_pixels; x < (col + 1) * config.cell_pixels; ++x)
			{
				auto px = (static_cast<size_t>(y) * width + x) * 3;
				image[px] = r;
				image[px + 1] = g;
				image[px + 2] = b;
			}
		}
	};
	for (const auto& p : state.projectiles)
	{
		if (p.falling())
		{
			fill(p.row, p.col, 255, 0, 0);
		}
		else
		{
			fill(p.row, p.col, 255, 255, 0);
		}
	}
	fill(config.rows - 1, state.agent_col, 255, 255, 255);
	return image;
}

ConstantImageEnv::ConstantImageEnv(int height, int width, int episode_length, int actions)
		: height_(height), width_(width), episode_length_(episode_length), actions_(actions)
{
	expects(height > 0 && width > 0 && episode_length > 0 && actions > 0, "constant env: invalid configuration");
	// a fixed smooth pattern rather than a flat colour, so the decoder has something spatial to fit
	image_.resize(static_cast<size_t>(height) * width * 3);
	for (int y = 0; y < height; ++y)
	{
		for (int x = 0; x < width; ++x)
		{
			auto px = (static_cast<size_t>(y) * width + x) * 3;
			image_[px] = static_cast<uint8_t>(64 + (128 * x) / width);
			image_[px + 1] = static_cast<uint8_t>(64 + (128 * y) / height);
			image_[px + 2] = 128;
		}
	}
}

EnvStep ConstantImageEnv::reset(uint64_t)
{
	steps_ = 0;
	return {image_, height_, width_, 0.0, true, false, false};
}

EnvStep ConstantImageEnv::step(int action)
{
	expects(action >= 0 && action < actions_, "constant env: invalid action");
	++steps_;
	const bool last = steps_ >= episode_length_;
	return {image_, height_, width_, 0.0, false, last, false};
}

std::vector<uint8_t> resize_image(const std::vector<uint8_t>& image, int height, int width, int out_height, int out_width)
{
	expects(image.size() == static_cast<size_t>(height) * width * 3, "resize_image: size mismatch");
	if (height == out_height && width == out_width)
	{
		return image;
	}
	std::vector<uint8_t> out(static_cast<size_t>(out_height) * out_width * 3);
	for (int y = 0; y < out_height; ++y)
	{
		const int sy = std::min(height - 1, (y * height) / out_height);
		for (int x = 0; x < out_width; ++x)
		{
			const int sx = std::min(width - 1, (x * width) / out_width);
			for (int c = 0; c < 3; ++c)
			{
				out[(static_cast<size_t>(y) * out_width + x) * 3 + c] = image[(static_cast<size_t>(sy) * width + sx) * 3 + c];
			}
		}
	}
	return out;
}

ResizeAdapter::ResizeAdapter(std::unique_ptr<Environment> inner, int height, int width)
		: inner_(std::move(inner)), height_(height), width_(width)
{
	expects(inner_ != nullptr, "resize adapter: null environment");
	expects(height > 0 && width > 0, "resize adapter: invalid size");
}

EnvStep ResizeAdapter::adapt(EnvStep step) const
{
	step.image = resize_image(step.image, step.height, step.width, height_, width_);
	step.height = height_;
	step.width = width_;
	return step;
}

EnvStep ResizeAdapter::reset(uint64_t seed)
{
	return adapt(inner_->reset(seed));
}

EnvStep ResizeAdapter::step(int action)
{
	return adapt(inner_->step(action));
}

int ClairvoyantPolicy::act(const DodgeWorld& env) const
{
	const auto& cfg = env.config();
	const auto& state = env.state();
	const int bottom = cfg.rows - 1;
	// steps until each projectile reaches the bottom row, as seen after the next move
	std::map<int, std::set<int>> arrivals;
	int horizon = 0;
	for (const auto& p : state.projectiles)
	{
		const int eta = p.telegraph_left + (bottom - p.row);
		arrivals[eta].insert(p.col);
		horizon = std::max(horizon, eta);
	}
	// safe[t][c]: standing in column c after move t survives every known arrival
	std::vector<std::vector<char>> safe(horizon + 2, std::vector<char>(cfg.cols, 1));
	for (int t = horizon; t >= 1; --t)
	{
		for (int c = 0; c < cfg.cols; ++c)
		{
			bool ok = arrivals.count(t) == 0 || arrivals[t].count(c) == 0;
			if (ok && t < horizon)
			{
				ok = false;
				for (int d = -1; d <= 1; ++d)
				{
					ok = ok || safe[t + 1][std::clamp(c + d, 0, cfg.cols - 1)];
				}
			}
			safe[t][c] = ok ? 1 : 0;
		}
	}
	for (int action : {DodgeWorld::kStay, DodgeWorld::kLeft, DodgeWorld::kRight})
	{
		const int col = std::clamp(state.agent_col + action - 1, 0, cfg.cols - 1);
		if (horizon == 0 || safe[1][col])
		{
			return action;
		}
	}
	return DodgeWorld::kStay;
}

} // namespace resdreamer
