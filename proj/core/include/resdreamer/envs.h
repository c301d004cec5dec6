#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace resdreamer
{

struct EnvStep
{
	std::vector<uint8_t> image; // HWC, 3 channels, [0, 255]
	int height = 0;
	int width = 0;
	double reward = 0.0;
	bool is_first = false;
	bool is_last = false;
	bool is_terminal = false;

	/// Continuation flag c_t used as a training target.
	float continuation() const { return is_terminal ? 0.0F : 1.0F; }
};

class Environment
{
public:
	virtual ~Environment() = default;

	virtual EnvStep reset(uint64_t seed) = 0;
	virtual EnvStep step(int action) = 0;
	virtual int action_count() const = 0;
	virtual int height() const = 0;
	virtual int width() const = 0;
	virtual std::string name() const = 0;
};

struct DodgeWorldConfig
{
	int rows = 16;
	int cols = 16;
	int cell_pixels = 2;
	double spawn_prob = 0.3;
	int telegraph_steps = 3;
	int max_steps = 200;
	double survive_reward = 0.1;
	double hit_reward = -1.0;
};

struct Projectile
{
	int col = 0;
	int row = 0;
	int telegraph_left = 0; // > 0 while the yellow telegraph is shown at the top row

	bool falling() const { return telegraph_left == 0; }
	bool operator==(const Projectile&) const = default;
};

struct DodgeWorldState
{
	int agent_col = 0;
	std::vector<Projectile> projectiles;
	int step_count = 0;
	bool done = true;
};

/// Projectile-dodging grid world rendered as RGB pixels. Actions: 0 left, 1 stay, 2 right.
class DodgeWorld : public Environment
{
public:
	static constexpr int kLeft = 0;
	static constexpr int kStay = 1;
	static constexpr int kRight = 2;

	explicit DodgeWorld(DodgeWorldConfig config = {});

	EnvStep reset(uint64_t seed) override;
	EnvStep step(int action) override;
	int action_count() const override { return 3; }
	int height() const override { return config_.rows * config_.cell_pixels; }
	int width() const override { return config_.cols * config_.cell_pixels; }
	std::string name() const override { return "dodgeworld"; }

	const DodgeWorldConfig& config() const { return config_; }
	const DodgeWorldState& state() const { return state_; }
	/// Replaces the internal state (tests and scripted scenarios).
	void set_state(DodgeWorldState state) { state_ = std::move(state); }

	std::vector<uint8_t> render() const;
	static std::vector<uint8_t> render(const DodgeWorldConfig& config, const DodgeWorldState& state);

private:
	double uniform();
	EnvStep observe(double reward, bool first, bool terminal, bool last) const;

	DodgeWorldConfig config_;
	DodgeWorldState state_;
	std::mt19937_64 rng_;
};

/// Emits the same image every step; episodes truncate after `episode_length` steps.
class ConstantImageEnv : public Environment
{
public:
	ConstantImageEnv(int height, int width, int episode_length = 100, int actions = 3);

	EnvStep reset(uint64_t seed) override;
	EnvStep step(int action) override;
	int action_count() const override { return actions_; }
	int height() const override { return height_; }
	int width() const override { return width_; }
	std::string name() const override { return "constant"; }

	const std::vector<uint8_t>& image() const { return image_; }

private:
	int height_;
	int width_;
	int episode_length_;
	int actions_;
	int steps_ = 0;
	std::vector<uint8_t> image_;
};

/// Nearest-neighbour resize of HWC RGB images.
std::vector<uint8_t> resize_image(const std::vector<uint8_t>& image, int height, int width, int out_height, int out_width);

/// Wraps any environment and resizes its observations to a fixed (height, width).
class ResizeAdapter : public Environment
{
public:
	ResizeAdapter(std::unique_ptr<Environment> inner, int height, int width);

	EnvStep reset(uint64_t seed) override;
	EnvStep step(int action) override;
	int action_count() const override { return inner_->action_count(); }
	int height() const override { return height_; }
	int width() const override { return width_; }
	std::string name() const override { return inner_->name(); }

	Environment& inner() { return *inner_; }

private:
	EnvStep adapt(EnvStep step) const;

	std::unique_ptr<Environment> inner_;
	int height_;
	int width_;
};

/// Reads the DodgeWorld internals and plans a projectile-free path over the known arrivals.
class ClairvoyantPolicy
{
public:
	int act(const DodgeWorld& env) const;
};

} // namespace resdreamer
