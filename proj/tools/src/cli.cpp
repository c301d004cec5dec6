#include "resdreamer_cli/cli.h"

#include "resdreamer/checkpoint.h"
#include "resdreamer/config.h"
#include "resdreamer/errors.h"
#include "resdreamer/pipeline.h"
#include "resdreamer/replay.h"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <sstream>

namespace resdreamer::cli
{

namespace fs = std::filesystem;
using nlohmann::json;

namespace
{

struct TrainArgs
{
	std::string config;
	std::string logdir;
	std::optional<uint64_t> seed;
	std::vector<std::string> overrides;
	bool resume = false;
};

struct EvalArgs
{
	std::string checkpoint;
	int episodes = 20;
	uint64_t seed = 0;
	bool random = false;
	std::string record;
};

struct VizArgs
{
	std::string checkpoint;
	int episodes = 1;
	uint64_t seed = 0;
	std::string out;
};

struct InspectArgs
{
	std::string dir;
};

std::pair<Agent, TrainConfig> load_agent(const std::string& dir)
{
	auto config = checkpoint_config(dir);
	auto agent = make_agent(config);
	load_checkpoint(dir, *agent, nullptr, nullptr);
	agent->eval();
	return {agent, config};
}

json cmd_train(const TrainArgs& args)
{
	auto overrides = args.overrides;
	if (args.seed)
	{
		overrides.push_back("seed=" + std::to_string(*args.seed));
	}
	auto config = load_config(args.config, overrides);
	RunOptions options;
	options.logdir = args.logdir;
	options.resume = args.resume;
	auto summary = run(config, options);
	auto out = summary.to_json();
	out["logdir"] = args.logdir;
	out["config_hash"] = config_hash(config.source);
	return out;
}

json cmd_eval(const EvalArgs& args)
{
	expects(args.episodes >= 1, "eval: --episodes must be at least 1");
	auto [agent, config] = load_agent(args.checkpoint);
	std::unique_ptr<ReplayBuffer> record;
	EvalHooks hooks;
	if (!args.record.empty())
	{
		// large enough that no evaluated step is evicted before saving
		const auto capacity = static_cast<size_t>(args.episodes) * (config.env.dodge.max_steps + 1) +
													static_cast<size_t>(args.episodes) * (config.env.constant_episode_length + 1);
		record = std::make_unique<ReplayBuffer>(capacity, config.env.height, config.env.width);
		hooks.record = record.get();
	}
	auto summary = evaluate(args.random ? nullptr : agent.get(), config, args.episodes, args.seed, hooks);
	if (record)
	{
		record->save(args.record);
	}
	auto out = summary.to_json();
	out["checkpoint"] = args.checkpoint;
	out["seed"] = args.seed;
	out["policy"] = args.random ? "random" : "actor";
	return out;
}

/// Min-max maps all panels jointly onto [0, 255].
std::vector<std::vector<uint8_t>> scale_panels(const std::vector<torch::Tensor>& panels)
{
	std::vector<std::vector<uint8_t>> out;
	if (panels.empty())
	{
		return out;
	}
	double lo = panels.front().min().item<double>();
	double hi = panels.front().max().item<double>();
	for (const auto& p : panels)
	{
		lo = std::min(lo, p.min().item<double>());
		hi = std::max(hi, p.max().item<double>());
	}
	const double range = hi - lo > 0.0 ? hi - lo : 1.0;
	for (const auto& p : panels)
	{
		auto scaled = ((p - lo) / range * 255.0).round().clamp(0.0, 255.0).to(torch::kUInt8);
		auto hwc = scaled.permute({1, 2, 0}).contiguous();
		out.emplace_back(hwc.data_ptr<uint8_t>(), hwc.data_ptr<uint8_t>() + hwc.numel());
	}
	return out;
}

json cmd_viz(const VizArgs& args)
{
	expects(args.episodes >= 1, "viz: --episodes must be at least 1");
	auto [agent, config] = load_agent(args.checkpoint);
	const auto& wc = config.hrssm;
	const int frames = wc.hint.frames;
	const int layers = wc.layers;
	const int h = config.env.height;
	const int w = config.env.width;
	const int panels = 1 + layers * frames + (layers - 1);
	const int strip_width = panels * w;
	fs::create_directories(args.out);
	int64_t written = 0;

	EvalHooks hooks;
	hooks.on_observe = [&](const ObserveResult& result, const EnvStep& step, int64_t episode, int64_t t) {
		std::vector<uint8_t> strip(static_cast<size_t>(h) * strip_width * 3, 0);
		auto blit = [&](int panel, const std::vector<uint8_t>& hwc) {
			for (int y = 0; y < h; ++y)
			{
				std::copy_n(
					hwc.data() + static_cast<size_t>(y) * w * 3,
					w * 3,
					strip.data() + (static_cast<size_t>(y) * strip_width + static_cast<size_t>(panel) * w) * 3);
			}
		};
		blit(0, resize_image(step.image, step.height, step.width, h, w));

		std::vector<torch::Tensor> tensors;
		std::vector<int> slots;
		for (int k = 0; k < layers; ++k)
		{
			const auto& hint = result.layers[k].obs.hint;
			if (!hint.defined())
			{
				continue;
			}
			for (int f = 0; f < frames; ++f)
			{
				tensors.push_back(hint[0].slice(0, 3 * f, 3 * f + 3));
				slots.push_back(1 + k * frames + f);
			}
		}
		for (int k = 1; k < layers; ++k)
		{
			const auto& residual = result.layers[k].residual_input;
			if (residual.defined())
			{
				tensors.push_back(residual[0]);
				slots.push_back(1 + layers * frames + (k - 1));
			}
		}
		auto scaled = scale_panels(tensors);
		for (size_t i = 0; i < scaled.size(); ++i)
		{
			blit(slots[i], scaled[i]);
		}
		write_png(fs::path(args.out) / ("ep" + std::to_string(episode) + "_t" + std::to_string(t) + ".png"), strip, h, strip_width);
		++written;
	};
	auto summary = evaluate(agent.get(), config, args.episodes, args.seed, hooks);
	auto out = summary.to_json();
	out["images"] = written;
	out["strip_width"] = strip_width;
	out["strip_height"] = h;
	out["out"] = args.out;
	return out;
}

json cmd_replay_inspect(const InspectArgs& args)
{
	expects(fs::is_directory(args.dir), "replay-inspect: not a directory: " + args.dir);
	auto report = inspect_replay_dir(args.dir);
	json files = json::array();
	for (const auto& f : report.files)
	{
		json entry{{"name", f.name}, {"ok", f.ok}, {"steps", f.steps}};
		if (f.ok)
		{
			entry["version"] = f.version;
		}
		else
		{
			entry["error"] = f.error;
		}
		files.push_back(entry);
	}
	return {
		{"dir", args.dir},
		{"format_version", kReplayFormatVersion},
		{"chunks", report.chunks},
		{"steps", report.steps},
		{"episodes_started", report.episodes_started},
		{"terminals", report.terminals},
		{"truncations", report.truncations},
		{"reward_sum", report.reward_sum},
		{"corrupt", report.corrupt},
		{"files", files}};
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
	CLI::App app{"ResDreamer world model and agent"};
	app.require_subcommand(1);

	TrainArgs train;
	auto* train_cmd = app.add_subcommand("train", "Train an agent and write metrics and checkpoints");
	train_cmd->add_option("--config", train.config, "JSON config file (defaults only when omitted)");
	train_cmd->add_option("--logdir", train.logdir, "Output directory")->required();
	train_cmd->add_option("--seed", train.seed, "Overrides the config seed");
	train_cmd->add_option("--set", train.overrides, "Override a config value, dotted.key=value")->take_all();
	train_cmd->add_flag("--resume", train.resume, "Continue from the latest checkpoint in the logdir");

	EvalArgs eval;
	auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint with frozen parameters");
	eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory (ckpt/<step>)")->required();
	eval_cmd->add_option("--episodes", eval.episodes, "Number of episodes");
	eval_cmd->add_option("--seed", eval.seed, "Evaluation seed");
	eval_cmd->add_flag("--random", eval.random, "Act uniformly at random instead of with the actor");
	eval_cmd->add_option("--record", eval.record, "Write the evaluated episodes as replay chunk files into this directory");

	VizArgs viz;
	auto* viz_cmd = app.add_subcommand("viz", "Write raw | hint frames | residual strips per step as PNG");
	viz_cmd->add_option("--checkpoint", viz.checkpoint, "Checkpoint directory (ckpt/<step>)")->required();
	viz_cmd->add_option("--episodes", viz.episodes, "Number of episodes");
	viz_cmd->add_option("--seed", viz.seed, "Seed");
	viz_cmd->add_option("--out", viz.out, "Output directory")->required();

	InspectArgs inspect;
	auto* inspect_cmd = app.add_subcommand("replay-inspect", "Summarise a replay directory");
	inspect_cmd->add_option("--dir", inspect.dir, "Replay directory")->required();

	try
	{
		app.parse(argc, argv);
	}
	catch (const CLI::CallForHelp& e)
	{
		out << app.help();
		return 0;
	}
	catch (const CLI::ParseError& e)
	{
		err << e.what() << '\n';
		out << json{{"ok", false}, {"error", e.what()}}.dump() << '\n';
		return e.get_exit_code() != 0 ? e.get_exit_code() : 2;
	}

	try
	{
		json result;
		if (*train_cmd)
		{
			result = cmd_train(train);
		}
		else if (*eval_cmd)
		{
			result = cmd_eval(eval);
		}
		else if (*viz_cmd)
		{
			result = cmd_viz(viz);
		}
		else
		{
			result = cmd_replay_inspect(inspect);
		}
		result["ok"] = true;
		result["command"] = app.get_subcommands().front()->get_name();
		out << result.dump() << '\n';
		return 0;
	}
	catch (const std::exception& e)
	{
		err << "error: " << e.what() << '\n';
		out << json{{"ok", false}, {"error", e.what()}}.dump() << '\n';
		return dynamic_cast<const ContractError*>(&e) != nullptr ? 2 : 1;
	}
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
	std::vector<const char*> argv{"resdreamer"};
	for (const auto& a : args)
	{
		argv.push_back(a.c_str());
	}
	return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace resdreamer::cli
