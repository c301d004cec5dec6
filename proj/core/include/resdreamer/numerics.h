#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <vector>

namespace resdreamer
{

// sign(x) * ln(1 + |x|) and its inverse. The scalar versions reject non-finite input.
double symlog(double x);
double symexp(double y);
torch::Tensor symlog(const torch::Tensor& x);
torch::Tensor symexp(const torch::Tensor& y);

/// Mixes a categorical distribution (last dim) with `mix` uniform mass.
torch::Tensor unimix(const torch::Tensor& probs, double mix);

/// Two-hot encoding over a fixed, strictly increasing set of bins.
///
/// Interpolation happens in the codec's "position" space. For the identity codec positions are the bin
/// centers themselves; for the symexp-spaced codec positions are evenly spaced in symlog space and the bin
/// centers are symexp of those positions, so encode/decode operate on symlog(value).
class TwohotCodec
{
public:
	enum class Transform
	{
		kIdentity,
		kSymexp,
	};

	static TwohotCodec identity(std::vector<double> centers);
	static TwohotCodec symexp_spaced(int bins, double limit);

	int bins() const { return static_cast<int>(positions_.size()); }
	Transform transform() const { return transform_; }
	/// Bin centers in value space.
	std::vector<double> bin_centers() const;
	const std::vector<double>& positions() const { return positions_; }

	std::vector<double> encode(double value) const;
	double decode(std::span<const double> weights) const;

	/// [...] -> [..., bins]
	torch::Tensor encode(const torch::Tensor& values) const;
	/// [..., bins] -> [...]; weights are expected to sum to one along the last dim.
	torch::Tensor decode(const torch::Tensor& weights) const;

private:
	TwohotCodec(std::vector<double> positions, Transform transform);

	std::vector<double> positions_;
	Transform transform_;
};

/// Per-channel running mean/variance for NCHW image batches, pooled over batch and spatial positions.
class EmaNormalizer
{
public:
	explicit EmaNormalizer(int channels = 3, double decay = 0.99, double floor = 1e-8);

	void update(const torch::Tensor& x);
	torch::Tensor normalize(const torch::Tensor& x) const;
	torch::Tensor denormalize(const torch::Tensor& y) const;

	int channels() const { return static_cast<int>(mean_.size()); }
	double decay() const { return decay_; }
	double floor() const { return floor_; }
	bool initialized() const { return initialized_; }
	const std::vector<double>& mean() const { return mean_; }
	const std::vector<double>& variance() const { return variance_; }

	/// Restores statistics from a checkpoint; variance is floored.
	void set_statistics(std::vector<double> mean, std::vector<double> variance, bool initialized);

	bool operator==(const EmaNormalizer&) const = default;

private:
	torch::Tensor channel_view(const std::vector<double>& values, const torch::Tensor& like) const;

	std::vector<double> mean_;
	std::vector<double> variance_;
	double decay_;
	double floor_;
	bool initialized_ = false;
};

/// Linear-interpolation percentile of an unsorted sample, q in [0, 100].
double percentile(std::vector<double> values, double q);

/// Running (5th, 95th) percentile range of returns, used to normalise advantages.
class ReturnScale
{
public:
	explicit ReturnScale(double decay = 0.99, double low_q = 5.0, double high_q = 95.0);

	void update(std::span<const double> returns);
	void update(const torch::Tensor& returns);

	/// max(1, high - low)
	double scale() const;
	double low() const { return low_; }
	double high() const { return high_; }
	double decay() const { return decay_; }
	bool initialized() const { return initialized_; }
	void set_state(double low, double high, bool initialized);

private:
	double decay_;
	double low_q_;
	double high_q_;
	double low_ = 0.0;
	double high_ = 0.0;
	bool initialized_ = false;
};

/// KL(p || q) summed over the trailing [groups, classes] dims. Both inputs must be non-negative.
torch::Tensor categorical_kl(const torch::Tensor& p, const torch::Tensor& q);

/// Exact entropy of categorical distributions along the last dim.
torch::Tensor categorical_entropy(const torch::Tensor& probs);

} // namespace resdreamer
