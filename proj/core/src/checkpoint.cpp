#include "resdreamer/checkpoint.h"

#include "resdreamer/blob.h"
#include "resdreamer/errors.h"

#include <fstream>
#include <sstream>

namespace resdreamer
{

namespace fs = std::filesystem;
using nlohmann::json;

namespace
{

const char* const kManifestFormat = "resdreamer.checkpoint";
const char* const kParamsFormat = "resdreamer.params";
const char* const kOptimFormat = "resdreamer.optim";
const char* const kStateFormat = "resdreamer.state";

std::string rng_to_string(const std::mt19937_64& rng)
{
	std::ostringstream out;
	out << rng;
	return out.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& text)
{
	std::istringstream in(text);
	in >> rng;
	if (!in)
	{
		throw FormatError("checkpoint: corrupt rng state");
	}
}

json normalizer_json(const EmaNormalizer& n)
{
	return {{"mean", n.mean()}, {"variance", n.variance()}, {"initialized", n.initialized()}};
}

std::vector<torch::Tensor> group_params(const torch::optim::Adam& optimizer)
{
	std::vector<torch::Tensor> params;
	for (const auto& group : optimizer.param_groups())
	{
		for (const auto& p : group.params())
		{
			params.push_back(p);
		}
	}
	return params;
}

} // namespace

RunState::RunState(uint64_t seed)
		: replay_rng(seed ^ 0x9e3779b97f4a7c15ULL),
			train_generator(at::make_generator<at::CPUGeneratorImpl>(seed + 1)),
			collect_generator(at::make_generator<at::CPUGeneratorImpl>(seed + 2))
{
}

void save_checkpoint(
	const fs::path& dir, const TrainConfig& config, const AgentImpl& agent, const Optimizers* optimizers, const RunState& run)
{
	fs::create_directories(dir);

	Blob params;
	for (const auto& item : agent.named_parameters(true))
	{
		params.arrays.push_back(tensor_to_array(item.key(), item.value().detach()));
	}
	for (const auto& item : agent.named_buffers(true))
	{
		params.arrays.push_back(tensor_to_array(item.key(), item.value().detach()));
	}
	write_blob(dir / "params.bin", kParamsFormat, kCheckpointFormatVersion, params);

	json groups = json::array();
	if (optimizers != nullptr)
	{
		Blob optim;
		for (size_t g = 0; g < optimizers->groups.size(); ++g)
		{
			const auto& opt = *optimizers->groups[g];
			const auto params_in_group = group_params(opt);
			groups.push_back({{"name", optimizers->names[g]}, {"params", params_in_group.size()}});
			for (size_t i = 0; i < params_in_group.size(); ++i)
			{
				auto it = opt.state().find(params_in_group[i].unsafeGetTensorImpl());
				if (it == opt.state().end())
				{
					continue;
				}
				const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
				const auto prefix = optimizers->names[g] + "." + std::to_string(i) + ".";
				optim.arrays.push_back(tensor_to_array(prefix + "exp_avg", s.exp_avg()));
				optim.arrays.push_back(tensor_to_array(prefix + "exp_avg_sq", s.exp_avg_sq()));
				optim.arrays.push_back(tensor_to_array(prefix + "step", torch::tensor({s.step()}, torch::kInt64)));
			}
		}
		write_blob(dir / "optim.bin", kOptimFormat, kCheckpointFormatVersion, optim);
	}

	Blob state;
	state.arrays.push_back(tensor_to_array("train_generator", run.train_generator.get_state()));
	state.arrays.push_back(tensor_to_array("collect_generator", run.collect_generator.get_state()));
	write_blob(dir / "state.bin", kStateFormat, kCheckpointFormatVersion, state);

	json normalizers = json::array();
	for (const auto& n : agent.normalizers)
	{
		normalizers.push_back(normalizer_json(n));
	}
	json manifest{
		{"format", kManifestFormat},
		{"version", kCheckpointFormatVersion},
		{"env_steps", run.env_steps},
		{"train_steps", run.train_steps},
		{"episodes", run.episodes},
		{"config_hash", config_hash(config.source)},
		{"config", config.source},
		{"normalizers", normalizers},
		{"return_scale",
		 {{"low", agent.return_scale.low()},
			{"high", agent.return_scale.high()},
			{"initialized", agent.return_scale.initialized()}}},
		{"replay_rng", rng_to_string(run.replay_rng)},
		{"optimizers", groups},
		{"files", {"params.bin", "state.bin"}},
	};
	if (optimizers != nullptr)
	{
		manifest["files"].push_back("optim.bin");
	}
	// manifest last: its presence marks the checkpoint complete
	const auto tmp = dir / "manifest.json.tmp";
	{
		std::ofstream out(tmp);
		out << manifest.dump(2) << '\n';
		if (!out)
		{
			throw std::runtime_error("checkpoint: failed to write " + tmp.string());
		}
	}
	fs::rename(tmp, dir / "manifest.json");
}

json read_manifest(const fs::path& dir)
{
	std::ifstream in(dir / "manifest.json");
	if (!in)
	{
		throw FormatError("checkpoint: no manifest in " + dir.string());
	}
	json manifest = json::parse(in, nullptr, false);
	if (manifest.is_discarded() || !manifest.is_object())
	{
		throw FormatError("checkpoint: malformed manifest in " + dir.string());
	}
	if (manifest.value("format", "") != kManifestFormat)
	{
		throw FormatError("checkpoint: unexpected format in " + dir.string());
	}
	if (manifest.value("version", -1) != kCheckpointFormatVersion)
	{
		throw FormatError("checkpoint: unsupported version in " + dir.string());
	}
	return manifest;
}

TrainConfig checkpoint_config(const fs::path& dir)
{
	auto manifest = read_manifest(dir);
	auto config = default_config_json();
	merge_config(config, manifest.at("config"));
	return config_from_json(config);
}

void load_checkpoint(const fs::path& dir, AgentImpl& agent, Optimizers* optimizers, RunState* run)
{
	const auto manifest = read_manifest(dir);

	const auto params = read_blob(dir / "params.bin", kParamsFormat, kCheckpointFormatVersion);
	{
		torch::NoGradGuard no_grad;
		auto assign = [&](const std::string& name, torch::Tensor& target) {
			if (!params.contains(name))
			{
				throw FormatError("checkpoint: params.bin lacks " + name);
			}
			auto value = array_to_tensor(params.array(name));
			if (value.sizes() != target.sizes())
			{
				throw FormatError("checkpoint: shape mismatch for " + name);
			}
			target.copy_(value);
		};
		for (auto& item : agent.named_parameters(true))
		{
			assign(item.key(), item.value());
		}
		for (auto& item : agent.named_buffers(true))
		{
			assign(item.key(), item.value());
		}
	}

	const auto& normalizers = manifest.at("normalizers");
	if (normalizers.size() != agent.normalizers.size())
	{
		throw FormatError("checkpoint: normalizer count mismatch");
	}
	for (size_t i = 0; i < normalizers.size(); ++i)
	{
		agent.normalizers[i].set_statistics(
			normalizers[i].at("mean").get<std::vector<double>>(),
			normalizers[i].at("variance").get<std::vector<double>>(),
			normalizers[i].at("initialized").get<bool>());
	}
	const auto& rs = manifest.at("return_scale");
	agent.return_scale.set_state(rs.at("low").get<double>(), rs.at("high").get<double>(), rs.at("initialized").get<bool>());

	if (optimizers != nullptr)
	{
		const auto optim = read_blob(dir / "optim.bin", kOptimFormat, kCheckpointFormatVersion);
		for (size_t g = 0; g < optimizers->groups.size(); ++g)
		{
			auto& opt = *optimizers->groups[g];
			const auto params_in_group = group_params(opt);
			for (size_t i = 0; i < params_in_group.size(); ++i)
			{
				const auto prefix = optimizers->names[g] + "." + std::to_string(i) + ".";
				if (!optim.contains(prefix + "step"))
				{
					continue;
				}
				auto s = std::make_unique<torch::optim::AdamParamState>();
				s->step(array_to_tensor(optim.array(prefix + "step")).item<int64_t>());
				s->exp_avg(array_to_tensor(optim.array(prefix + "exp_avg")));
				s->exp_avg_sq(array_to_tensor(optim.array(prefix + "exp_avg_sq")));
				opt.state()[params_in_group[i].unsafeGetTensorImpl()] = std::move(s);
			}
		}
	}

	if (run != nullptr)
	{
		const auto state = read_blob(dir / "state.bin", kStateFormat, kCheckpointFormatVersion);
		run->env_steps = manifest.at("env_steps").get<int64_t>();
		run->train_steps = manifest.at("train_steps").get<int64_t>();
		run->episodes = manifest.at("episodes").get<int64_t>();
		rng_from_string(run->replay_rng, manifest.at("replay_rng").get<std::string>());
		run->train_generator.set_state(array_to_tensor(state.array("train_generator")));
		run->collect_generator.set_state(array_to_tensor(state.array("collect_generator")));
	}
}

std::optional<fs::path> latest_checkpoint(const fs::path& logdir)
{
	const auto root = logdir / "ckpt";
	if (!fs::is_directory(root))
	{
		return std::nullopt;
	}
	std::optional<fs::path> best;
	int64_t best_step = -1;
	for (const auto& entry : fs::directory_iterator(root))
	{
		const auto name = entry.path().filename().string();
		if (!entry.is_directory() || name.empty() || name.find_first_not_of("0123456789") != std::string::npos)
		{
			continue;
		}
		if (!fs::exists(entry.path() / "manifest.json"))
		{
			continue;
		}
		const auto step = std::stoll(name);
		if (step > best_step)
		{
			best_step = step;
			best = entry.path();
		}
	}
	return best;
}

} // namespace resdreamer
