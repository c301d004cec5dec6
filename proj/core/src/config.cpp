#include "resdreamer/config.h"

#include "resdreamer/errors.h"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace resdreamer
{

using nlohmann::json;

namespace
{

template <typename E>
E parse_enum(const json& value, std::initializer_list<std::pair<const char*, E>> names, const std::string& key)
{
	const auto text = value.get<std::string>();
	for (const auto& [name, e] : names)
	{
		if (text == name)
		{
			return e;
		}
	}
	throw ContractError("config: invalid value '" + text + "' for " + key);
}

bool same_kind(const json& a, const json& b)
{
	if (a.is_number() && b.is_number())
	{
		// integers may not silently become fractions
		return !(a.is_number_integer() && b.is_number_float());
	}
	return a.type() == b.type();
}

} // namespace

json default_config_json()
{
	return json{
		{"seed", 0},
		{"env",
		 {{"id", "dodgeworld"},
			{"height", 32},
			{"width", 32},
			{"num_envs", 1},
			{"spawn_prob", 0.3},
			{"telegraph_steps", 3},
			{"max_steps", 200},
			{"survive_reward", 0.1},
			{"hit_reward", -1.0},
			{"constant_episode_length", 100}}},
		{"hrssm",
		 {{"layers", 2},
			{"h_size", 256},
			{"latent_groups", 16},
			{"latent_classes", 16},
			{"hidden_size", 256},
			{"encoder_channels", 16},
			{"decoder_channels", 16},
			{"frames", 4},
			{"stride", 1},
			{"horizon", 0},
			{"hints", "rollout"},
			{"hint_start", "current"},
			{"only_residual_hints", false},
			{"no_residual", false},
			{"dreamer_plus_rollout", false},
			{"normalizer_decay", 0.99},
			{"normalizer_floor", 1e-8},
			{"free_nats", 1.0},
			{"unimix", 0.01}}},
		{"behavior",
		 {{"hidden_size", 256},
			{"mlp_layers", 2},
			{"bins", 255},
			{"twohot_limit", 20.0},
			{"stacked_state_heads", false},
			{"imagination_horizon", 15},
			{"value_horizon", 333.0},
			{"lambda", 0.95},
			{"entropy_coeff", 3e-4},
			{"slow_critic_rate", 0.02},
			{"return_decay", 0.99},
			{"entry_stride", 1}}},
		{"loss",
		 {{"rec", 1.0},
			{"dyn", 1.0},
			{"rep", 0.1},
			{"reward", 1.0},
			{"cont", 1.0},
			{"value", 1.0},
			{"replay_value", 0.3},
			{"policy", 1.0},
			{"slow_reg", 1.0}}},
		{"train",
		 {{"env_steps", 50000},
			{"batch_size", 8},
			{"batch_length", 32},
			{"train_ratio", 32.0},
			{"buffer_size", 200000},
			{"learning_rate", 4e-5},
			{"adam_eps", 1e-8},
			{"grad_clip", 1000.0},
			{"prefill", 1024},
			{"synchronous", true},
			{"checkpoint_every", 10000},
			{"eval_every", 0},
			{"eval_episodes", 20},
			{"snapshot_every", 1},
			{"hint_actions", "actor_sample"},
			{"save_replay", true}}},
	};
}

void merge_config(json& base, const json& overlay, const std::string& prefix)
{
	expects(overlay.is_object(), "config: expected an object at '" + (prefix.empty() ? "<root>" : prefix) + "'");
	for (const auto& [key, value] : overlay.items())
	{
		const auto path = prefix.empty() ? key : prefix + "." + key;
		if (!base.contains(key))
		{
			throw ContractError("config: unknown key '" + path + "'");
		}
		auto& target = base[key];
		if (target.is_object())
		{
			merge_config(target, value, path);
			continue;
		}
		if (!same_kind(target, value))
		{
			throw ContractError("config: type mismatch for '" + path + "': expected " + target.type_name());
		}
		target = value.is_number_integer() && target.is_number_float() ? json(value.get<double>()) : value;
	}
}

void apply_override(json& config, const std::string& assignment)
{
	const auto eq = assignment.find('=');
	expects(eq != std::string::npos && eq > 0, "config: override must look like key=value, got '" + assignment + "'");
	const auto key = assignment.substr(0, eq);
	const auto text = assignment.substr(eq + 1);
	json value = json::parse(text, nullptr, false);
	if (value.is_discarded())
	{
		value = text;
	}
	// rebuild the nested object so that merge_config does the key and type checks
	json overlay = value;
	std::string rest = key;
	std::vector<std::string> parts;
	size_t start = 0;
	while (true)
	{
		const auto dot = rest.find('.', start);
		parts.push_back(rest.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
		if (dot == std::string::npos)
		{
			break;
		}
		start = dot + 1;
	}
	for (auto it = parts.rbegin(); it != parts.rend(); ++it)
	{
		expects(!it->empty(), "config: empty key segment in '" + key + "'");
		overlay = json{{*it, overlay}};
	}
	merge_config(config, overlay);
}

double TrainConfig::env_steps_per_train_step() const
{
	return static_cast<double>(train.batch_size) * train.batch_length / train.train_ratio;
}

void TrainConfig::validate() const
{
	hrssm.validate();
	behavior.validate();
	expects(env.num_envs >= 1, "config: env.num_envs must be >= 1");
	expects(train.train_ratio > 0.0, "config: train.train_ratio must be > 0");
	expects(train.batch_size >= 1 && train.batch_length >= 1, "config: batch shape must be positive");
	expects(train.buffer_size >= train.batch_length, "config: buffer smaller than one sequence");
	expects(train.learning_rate > 0.0 && train.adam_eps > 0.0 && train.grad_clip > 0.0, "config: optimiser settings must be positive");
	expects(train.env_steps >= 0 && train.prefill >= 0, "config: step counts must be non-negative");
	expects(train.checkpoint_every >= 0 && train.eval_every >= 0, "config: intervals must be non-negative");
	expects(train.eval_episodes >= 1, "config: train.eval_episodes must be >= 1");
	expects(train.snapshot_every >= 1, "config: train.snapshot_every must be >= 1");
	expects(actor_critic.imagination_horizon >= 1, "config: imagination horizon must be >= 1");
	expects(actor_critic.entry_stride >= 1, "config: entry_stride must be >= 1");
	const auto& r = actor_critic.returns;
	expects(r.gamma > 0.0 && r.gamma < 1.0 && r.lambda > 0.0 && r.lambda < 1.0, "config: gamma and lambda must lie in (0,1)");
	expects(actor_critic.slow_critic_rate >= 0.0 && actor_critic.slow_critic_rate <= 1.0, "config: slow_critic_rate in [0,1]");
	expects(actor_critic.entropy_coeff >= 0.0, "config: entropy_coeff must be >= 0");
}

TrainConfig config_from_json(const json& j)
{
	TrainConfig c;
	c.source = j;
	c.seed = j.at("seed").get<uint64_t>();

	const auto& e = j.at("env");
	c.env.id = e.at("id").get<std::string>();
	expects(c.env.id == "dodgeworld" || c.env.id == "constant", "config: unknown env.id '" + c.env.id + "'");
	c.env.height = e.at("height").get<int>();
	c.env.width = e.at("width").get<int>();
	c.env.num_envs = e.at("num_envs").get<int>();
	c.env.dodge.spawn_prob = e.at("spawn_prob").get<double>();
	c.env.dodge.telegraph_steps = e.at("telegraph_steps").get<int>();
	c.env.dodge.max_steps = e.at("max_steps").get<int>();
	c.env.dodge.survive_reward = e.at("survive_reward").get<double>();
	c.env.dodge.hit_reward = e.at("hit_reward").get<double>();
	c.env.constant_episode_length = e.at("constant_episode_length").get<int>();

	const auto& h = j.at("hrssm");
	auto& hr = c.hrssm;
	hr.layers = h.at("layers").get<int>();
	hr.block.h_size = h.at("h_size").get<int>();
	hr.block.latent_groups = h.at("latent_groups").get<int>();
	hr.block.latent_classes = h.at("latent_classes").get<int>();
	hr.block.hidden_size = h.at("hidden_size").get<int>();
	hr.block.encoder_channels = h.at("encoder_channels").get<int>();
	hr.block.decoder_channels = h.at("decoder_channels").get<int>();
	hr.block.unimix = h.at("unimix").get<double>();
	hr.block.image_height = c.env.height;
	hr.block.image_width = c.env.width;
	hr.block.action_size = 3;
	hr.hint.frames = h.at("frames").get<int>();
	hr.hint.stride = h.at("stride").get<int>();
	const auto horizon = h.at("horizon").get<int>();
	expects(horizon == 0 || horizon == hr.hint.frames * hr.hint.stride, "config: hrssm.horizon must equal frames * stride");
	hr.hints = parse_enum<HintMode>(
		h.at("hints"), {{"rollout", HintMode::kRollout}, {"zero", HintMode::kZero}, {"off", HintMode::kOff}}, "hrssm.hints");
	hr.hint_start = parse_enum<HintStart>(
		h.at("hint_start"), {{"current", HintStart::kCurrent}, {"next", HintStart::kNext}}, "hrssm.hint_start");
	hr.only_residual_hints = h.at("only_residual_hints").get<bool>();
	hr.no_residual = h.at("no_residual").get<bool>();
	if (h.at("dreamer_plus_rollout").get<bool>())
	{
		hr.layers = 1;
		hr.hints = HintMode::kRollout;
	}
	hr.normalizer_decay = h.at("normalizer_decay").get<double>();
	hr.normalizer_floor = h.at("normalizer_floor").get<double>();
	hr.free_nats = h.at("free_nats").get<double>();

	const auto& b = j.at("behavior");
	auto& bc = c.behavior;
	bc.stacked_state_heads = b.at("stacked_state_heads").get<bool>();
	bc.feature_size =
		behavior_feature_size(hr.block.h_size, hr.block.latent_size(), hr.layers, bc.stacked_state_heads);
	bc.action_size = hr.block.action_size;
	bc.hidden_size = b.at("hidden_size").get<int>();
	bc.mlp_layers = b.at("mlp_layers").get<int>();
	bc.bins = b.at("bins").get<int>();
	bc.twohot_limit = b.at("twohot_limit").get<double>();
	bc.unimix = hr.block.unimix;

	auto& ac = c.actor_critic;
	ac.imagination_horizon = b.at("imagination_horizon").get<int>();
	const auto value_horizon = b.at("value_horizon").get<double>();
	expects(value_horizon > 1.0, "config: behavior.value_horizon must exceed 1");
	ac.returns.gamma = 1.0 - 1.0 / value_horizon;
	ac.returns.lambda = b.at("lambda").get<double>();
	ac.entropy_coeff = b.at("entropy_coeff").get<double>();
	ac.slow_critic_rate = b.at("slow_critic_rate").get<double>();
	ac.return_decay = b.at("return_decay").get<double>();
	ac.entry_stride = b.at("entry_stride").get<int>();

	const auto& l = j.at("loss");
	c.loss = {
		l.at("rec").get<double>(),
		l.at("dyn").get<double>(),
		l.at("rep").get<double>(),
		l.at("reward").get<double>(),
		l.at("cont").get<double>(),
		l.at("value").get<double>(),
		l.at("replay_value").get<double>(),
		l.at("policy").get<double>(),
		l.at("slow_reg").get<double>()};

	const auto& t = j.at("train");
	auto& tr = c.train;
	tr.env_steps = t.at("env_steps").get<int64_t>();
	tr.batch_size = t.at("batch_size").get<int>();
	tr.batch_length = t.at("batch_length").get<int>();
	tr.train_ratio = t.at("train_ratio").get<double>();
	tr.buffer_size = t.at("buffer_size").get<int64_t>();
	tr.learning_rate = t.at("learning_rate").get<double>();
	tr.adam_eps = t.at("adam_eps").get<double>();
	tr.grad_clip = t.at("grad_clip").get<double>();
	tr.prefill = t.at("prefill").get<int64_t>();
	tr.synchronous = t.at("synchronous").get<bool>();
	tr.checkpoint_every = t.at("checkpoint_every").get<int64_t>();
	tr.eval_every = t.at("eval_every").get<int64_t>();
	tr.eval_episodes = t.at("eval_episodes").get<int>();
	tr.snapshot_every = t.at("snapshot_every").get<int>();
	tr.hint_actions = parse_enum<HintActions>(
		t.at("hint_actions"),
		{{"actor_sample", HintActions::kActorSample}, {"actor_mode", HintActions::kActorMode}, {"uniform", HintActions::kUniform}},
		"train.hint_actions");
	tr.save_replay = t.at("save_replay").get<bool>();

	c.validate();
	return c;
}

TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides)
{
	auto config = default_config_json();
	if (!path.empty())
	{
		std::ifstream in(path);
		if (!in)
		{
			throw std::runtime_error("config: cannot open " + path.string());
		}
		json file;
		try
		{
			file = json::parse(in);
		}
		catch (const json::parse_error& e)
		{
			throw ContractError("config: " + path.string() + " is not valid JSON: " + e.what());
		}
		merge_config(config, file);
	}
	for (const auto& o : overrides)
	{
		apply_override(config, o);
	}
	return config_from_json(config);
}

std::string config_hash(const json& j)
{
	uint64_t hash = 1469598103934665603ULL;
	for (unsigned char ch : j.dump())
	{
		hash ^= ch;
		hash *= 1099511628211ULL;
	}
	char buf[17];
	std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
	return buf;
}

std::unique_ptr<Environment> make_env(const EnvConfig& config)
{
	std::unique_ptr<Environment> env;
	if (config.id == "dodgeworld")
	{
		env = std::make_unique<DodgeWorld>(config.dodge);
	}
	else if (config.id == "constant")
	{
		env = std::make_unique<ConstantImageEnv>(config.height, config.width, config.constant_episode_length);
	}
	else
	{
		throw ContractError("make_env: unknown environment '" + config.id + "'");
	}
	if (env->height() != config.height || env->width() != config.width)
	{
		env = std::make_unique<ResizeAdapter>(std::move(env), config.height, config.width);
	}
	return env;
}

} // namespace resdreamer
