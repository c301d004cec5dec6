#include "resdreamer/numerics.h"

#include "resdreamer/errors.h"

#include <algorithm>
#include <cmath>
#include <string>

namespace resdreamer
{

double symlog(double x)
{
	if (!std::isfinite(x))
	{
		throw DomainError("symlog: non-finite input");
	}
	return std::copysign(std::log1p(std::abs(x)), x);
}

double symexp(double y)
{
	if (!std::isfinite(y))
	{
		throw DomainError("symexp: non-finite input");
	}
	return std::copysign(std::expm1(std::abs(y)), y);
}

torch::Tensor symlog(const torch::Tensor& x)
{
	return torch::sign(x) * torch::log1p(torch::abs(x));
}

torch::Tensor symexp(const torch::Tensor& y)
{
	return torch::sign(y) * torch::expm1(torch::abs(y));
}

torch::Tensor unimix(const torch::Tensor& probs, double mix)
{
	if (mix <= 0.0)
	{
		return probs;
	}
	return (1.0 - mix) * probs + mix / static_cast<double>(probs.size(-1));
}

TwohotCodec::TwohotCodec(std::vector<double> positions, Transform transform)
		: positions_(std::move(positions)), transform_(transform)
{
	expects(positions_.size() >= 2, "twohot codec needs at least 2 bins");
	for (size_t i = 1; i < positions_.size(); ++i)
	{
		expects(positions_[i] > positions_[i - 1], "twohot bin centers must be strictly increasing");
	}
}

TwohotCodec TwohotCodec::identity(std::vector<double> centers)
{
	return TwohotCodec(std::move(centers), Transform::kIdentity);
}

TwohotCodec TwohotCodec::symexp_spaced(int bins, double limit)
{
	expects(bins >= 2, "twohot codec needs at least 2 bins");
	expects(limit > 0.0, "twohot limit must be positive");
	std::vector<double> positions(bins);
	for (int i = 0; i < bins; ++i)
	{
		positions[i] = -limit + 2.0 * limit * static_cast<double>(i) / static_cast<double>(bins - 1);
	}
	// keep the centre bin exactly at zero for odd bin counts
	if (bins % 2 == 1)
	{
		positions[bins / 2] = 0.0;
	}
	return TwohotCodec(std::move(positions), Transform::kSymexp);
}

std::vector<double> TwohotCodec::bin_centers() const
{
	if (transform_ == Transform::kIdentity)
	{
		return positions_;
	}
	std::vector<double> centers(positions_.size());
	std::transform(positions_.begin(), positions_.end(), centers.begin(), [](double p) { return symexp(p); });
	return centers;
}

std::vector<double> TwohotCodec::encode(double value) const
{
	if (std::isnan(value))
	{
		throw DomainError("twohot_encode: NaN value");
	}
	double x = value;
	if (transform_ == Transform::kSymexp && std::isfinite(value))
	{
		x = symlog(value);
	}
	x = std::clamp(x, positions_.front(), positions_.back());
	std::vector<double> weights(positions_.size(), 0.0);
	auto above = std::upper_bound(positions_.begin(), positions_.end(), x);
	if (above == positions_.end())
	{
		weights.back() = 1.0;
		return weights;
	}
	const auto hi = static_cast<size_t>(above - positions_.begin());
	const size_t lo = hi - 1;
	const double w_lo = (positions_[hi] - x) / (positions_[hi] - positions_[lo]);
	weights[lo] = w_lo;
	weights[hi] = 1.0 - w_lo;
	return weights;
}

double TwohotCodec::decode(std::span<const double> weights) const
{
	expects(weights.size() == positions_.size(), "twohot_decode: weight count does not match bins");
	double x = 0.0;
	for (size_t i = 0; i < weights.size(); ++i)
	{
		x += weights[i] * positions_[i];
	}
	return transform_ == Transform::kSymexp ? symexp(x) : x;
}

torch::Tensor TwohotCodec::encode(const torch::Tensor& values) const
{
	if (torch::isnan(values).any().item<bool>())
	{
		throw DomainError("twohot_encode: NaN value");
	}
	auto dtype = values.is_floating_point() ? values.scalar_type() : torch::kFloat32;
	auto pos = torch::tensor(positions_, torch::TensorOptions().dtype(torch::kFloat64)).to(dtype);
	auto x = values.detach().to(dtype);
	if (transform_ == Transform::kSymexp)
	{
		x = symlog(x);
	}
	x = x.clamp(positions_.front(), positions_.back());
	const int64_t nbins = bins();
	auto idx = torch::bucketize(x, pos, /*out_int32=*/false, /*right=*/true);
	auto above = idx.clamp_max(nbins - 1);
	auto below = (idx - 1).clamp_min(0);
	auto p_below = pos.index_select(0, below.flatten()).view_as(x);
	auto p_above = pos.index_select(0, above.flatten()).view_as(x);
	auto span = p_above - p_below;
	auto w_below = torch::where(span > 0, (p_above - x) / torch::where(span > 0, span, torch::ones_like(span)), torch::ones_like(x));
	auto w_above = 1.0 - w_below;

	auto shape = x.sizes().vec();
	shape.push_back(nbins);
	auto out = torch::zeros(shape, x.options());
	out.scatter_add_(-1, below.unsqueeze(-1), w_below.unsqueeze(-1));
	out.scatter_add_(-1, above.unsqueeze(-1), w_above.unsqueeze(-1));
	return out;
}

torch::Tensor TwohotCodec::decode(const torch::Tensor& weights) const
{
	expects(weights.size(-1) == bins(), "twohot_decode: weight count does not match bins");
	auto pos = torch::tensor(positions_, torch::TensorOptions().dtype(torch::kFloat64)).to(weights.scalar_type());
	auto x = (weights * pos).sum(-1);
	return transform_ == Transform::kSymexp ? symexp(x) : x;
}

EmaNormalizer::EmaNormalizer(int channels, double decay, double floor)
		: mean_(channels, 0.0), variance_(channels, 1.0), decay_(decay), floor_(floor)
{
	expects(channels > 0, "normalizer needs at least one channel");
	expects(decay > 0.0 && decay < 1.0, "normalizer decay must lie in (0,1)");
	expects(floor > 0.0, "normalizer floor must be positive");
}

void EmaNormalizer::update(const torch::Tensor& x)
{
	expects(x.dim() >= 2 && x.size(1) == channels(),
		"normalizer_update: expected channel dim 1 of size " + std::to_string(channels()));
	const int64_t c = channels();
	auto flat = x.detach().to(torch::kFloat64).transpose(0, 1).reshape({c, -1});
	auto batch_mean = flat.mean(1).contiguous();
	auto batch_var = flat.var(1, /*unbiased=*/false).contiguous();
	auto m = batch_mean.data_ptr<double>();
	auto v = batch_var.data_ptr<double>();
	for (int64_t i = 0; i < c; ++i)
	{
		mean_[i] = decay_ * mean_[i] + (1.0 - decay_) * m[i];
		variance_[i] = std::max(floor_, decay_ * variance_[i] + (1.0 - decay_) * v[i]);
	}
	initialized_ = true;
}

torch::Tensor EmaNormalizer::channel_view(const std::vector<double>& values, const torch::Tensor& like) const
{
	std::vector<int64_t> shape(like.dim(), 1);
	shape[1] = channels();
	return torch::tensor(values, torch::TensorOptions().dtype(torch::kFloat64)).to(like.scalar_type()).view(shape);
}

torch::Tensor EmaNormalizer::normalize(const torch::Tensor& x) const
{
	expects(x.dim() >= 2 && x.size(1) == channels(), "normalize: channel mismatch");
	std::vector<double> scale(variance_.size());
	std::transform(variance_.begin(), variance_.end(), scale.begin(), [this](double v) { return std::sqrt(v + floor_); });
	return (x - channel_view(mean_, x)) / channel_view(scale, x);
}

torch::Tensor EmaNormalizer::denormalize(const torch::Tensor& y) const
{
	expects(y.dim() >= 2 && y.size(1) == channels(), "denormalize: channel mismatch");
	std::vector<double> scale(variance_.size());
	std::transform(variance_.begin(), variance_.end(), scale.begin(), [this](double v) { return std::sqrt(v + floor_); });
	return y * channel_view(scale, y) + channel_view(mean_, y);
}

void EmaNormalizer::set_statistics(std::vector<double> mean, std::vector<double> variance, bool initialized)
{
	expects(mean.size() == mean_.size() && variance.size() == variance_.size(), "normalizer statistics size mismatch");
	mean_ = std::move(mean);
	variance_ = std::move(variance);
	for (auto& v : variance_)
	{
		v = std::max(v, floor_);
	}
	initialized_ = initialized;
}

double percentile(std::vector<double> values, double q)
{
	expects(!values.empty(), "percentile of an empty sample");
	expects(q >= 0.0 && q <= 100.0, "percentile q must lie in [0,100]");
	std::sort(values.begin(), values.end());
	const double h = (static_cast<double>(values.size()) - 1.0) * q / 100.0;
	const auto lo = static_cast<size_t>(std::floor(h));
	const size_t hi = std::min(lo + 1, values.size() - 1);
	return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

ReturnScale::ReturnScale(double decay, double low_q, double high_q) : decay_(decay), low_q_(low_q), high_q_(high_q)
{
	expects(decay > 0.0 && decay < 1.0, "return scale decay must lie in (0,1)");
	expects(low_q < high_q, "return scale quantiles out of order");
}

void ReturnScale::update(std::span<const double> returns)
{
	expects(!returns.empty(), "return_scale_update: empty batch");
	std::vector<double> values(returns.begin(), returns.end());
	const double lo = percentile(values, low_q_);
	const double hi = percentile(std::move(values), high_q_);
	if (!initialized_)
	{
		low_ = lo;
		high_ = hi;
		initialized_ = true;
		return;
	}
	low_ = decay_ * low_ + (1.0 - decay_) * lo;
	high_ = decay_ * high_ + (1.0 - decay_) * hi;
}

void ReturnScale::update(const torch::Tensor& returns)
{
	auto flat = returns.detach().to(torch::kFloat64).flatten().contiguous();
	update(std::span<const double>(flat.data_ptr<double>(), static_cast<size_t>(flat.numel())));
}

double ReturnScale::scale() const
{
	return std::max(1.0, high_ - low_);
}

void ReturnScale::set_state(double low, double high, bool initialized)
{
	low_ = low;
	high_ = high;
	initialized_ = initialized;
}

torch::Tensor categorical_kl(const torch::Tensor& p, const torch::Tensor& q)
{
	expects(p.sizes() == q.sizes(), "categorical_kl: shape mismatch");
	expects(p.dim() >= 2, "categorical_kl: expected [..., groups, classes]");
	{
		torch::NoGradGuard no_grad;
		expects(!(p < 0).any().item<bool>() && !(q < 0).any().item<bool>(), "categorical_kl: negative probability");
	}
	// clamped logs keep the masked branch finite so zero-probability entries backpropagate zeros
	auto log_p = torch::log(p.clamp_min(1e-30));
	auto log_q = torch::log(q.clamp_min(1e-30));
	auto terms = torch::where(p > 0, p * (log_p - log_q), torch::zeros_like(p));
	return terms.sum({-2, -1});
}

torch::Tensor categorical_entropy(const torch::Tensor& probs)
{
	auto terms = torch::where(probs > 0, probs * torch::log(probs.clamp_min(1e-30)), torch::zeros_like(probs));
	return -terms.sum(-1);
}

} // namespace resdreamer
