#pragma once

#include "resdreamer/losses.h"
#include "resdreamer/numerics.h"
#include "resdreamer/ppb.h"

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace resdreamer
{

enum class HintMode
{
	kRollout, // decoded open-loop foresight frames
	kZero,		// hint slot present but filled with zeros
	kOff,			// no hint slot at all
};

enum class Mode
{
	kTrain,
	kEval,
};

struct HrssmConfig
{
	int layers = 2;
	/// Shared block settings; input channels and decoder heads are derived per layer.
	PpbConfig block;
	HintSpec hint;
	HintMode hints = HintMode::kRollout;
	HintStart hint_start = HintStart::kCurrent;
	bool only_residual_hints = false;
	bool no_residual = false;
	double normalizer_decay = 0.99;
	double normalizer_floor = 1e-8;
	double free_nats = 1.0;

	void validate() const;
	bool residual_enabled() const { return layers > 1 && !no_residual; }
	bool hint_slot() const { return hints != HintMode::kOff; }
	PpbConfig layer_config(int layer) const;
	int enhanced_channels(int layer) const;
	/// Elements exchanged between adjacent layers per step and batch row.
	int64_t traffic_per_step() const;
};

/// 3F + 3 channels at the bottom layer, 3F + 6 above it (hint slot and residual slot optional).
int enhanced_channel_count(int layer, int frames, bool hint_slot, bool residual_slot);

struct HierState
{
	std::vector<LayerState> layers;
	std::vector<EmaNormalizer> normalizers; // Norm^1 .. Norm^{L-1}
};

/// Stop-gradient stack [hint frames, raw, residual] along channels.
struct EnhancedObservation
{
	torch::Tensor hint;
	torch::Tensor raw;
	torch::Tensor residual;
	torch::Tensor stacked;

	int64_t channels() const { return stacked.size(1); }
};

/// Norm^k(lower_obs - lower_recon). In training mode the normalizer absorbs the raw difference first.
torch::Tensor build_residual(
	int layer, const torch::Tensor& lower_obs, const torch::Tensor& lower_recon, EmaNormalizer& normalizer, Mode mode);

/// Frame-wise sum of own and upper rollouts (upper may be empty), concatenated along channels in time order.
torch::Tensor build_hint(int layer, std::span<const torch::Tensor> own, std::span<const torch::Tensor> upper);

EnhancedObservation assemble_enhanced(
	int layer, const torch::Tensor& hint, const torch::Tensor& raw, const torch::Tensor& residual);

struct LayerStep
{
	EnhancedObservation obs;
	PosteriorPriorPair latent;
	Reconstruction recon;
	/// o_res^k used as this layer's residual input and reconstruction target (undefined at the bottom).
	torch::Tensor residual_input;
	WorldModelLosses losses; // per sample [B]
	torch::Tensor kl;				 // unclipped, detached [B]
	torch::Tensor rec_mse;	 // detached scalar, raw head mean squared error per element
};

struct ObserveResult
{
	HierState state;
	std::vector<LayerStep> layers;
	int64_t traffic_elements = 0; // per batch row
	int rollout_transitions = 0;
};

struct ImaginedTrajectory
{
	std::vector<std::vector<LayerState>> states; // steps + 1 entries
	std::vector<torch::Tensor> actions;					 // steps entries, one-hot
};

struct JointRollout
{
	std::vector<std::vector<Reconstruction>> frames; // [layer][frame]
	int transitions = 0;
};

/// Stack of predictive processing blocks linked by residuals (upward) and foresight hints (downward).
class HrssmImpl : public torch::nn::Module
{
public:
	explicit HrssmImpl(HrssmConfig config);

	const HrssmConfig& config() const { return config_; }
	int layer_count() const { return config_.layers; }
	Ppb& layer(int k) { return layers_[k]; }
	const Ppb& layer(int k) const { return layers_[k]; }

	HierState initial_state(int64_t batch, const torch::TensorOptions& options = {}) const;

	/// Advances every layer by one observation (see README for the step layout).
	///
	/// `state` holds (h, z) after the previous observation, `prev_action` the one-hot action taken since,
	/// `o_raw` the image in [-0.5, 0.5] as NCHW and `is_first` [B] marks rows that restart from zeros.
	ObserveResult observe(
		const HierState& state,
		const torch::Tensor& prev_action,
		const torch::Tensor& o_raw,
		const torch::Tensor& is_first,
		Mode mode,
		const ActionProvider& hint_actions,
		at::Generator& generator);

	/// Joint prior rollout of all layers from deterministic states `h` with shared actions.
	JointRollout joint_rollout(const std::vector<torch::Tensor>& h, const ActionProvider& actions, at::Generator& generator);

	/// Latent-only imagination: prior sampling at every layer, no decoding, no hints.
	ImaginedTrajectory imagine(
		const std::vector<LayerState>& start, const ActionProvider& actor, int steps, at::Generator& generator);

private:
	HrssmConfig config_;
	std::vector<Ppb> layers_;
};
TORCH_MODULE(Hrssm);

} // namespace resdreamer
