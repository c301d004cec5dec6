#include "resdreamer/pipeline.h"

#include "resdreamer/errors.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <iostream>
#include <thread>

namespace resdreamer
{

namespace fs = std::filesystem;
using nlohmann::json;

NonFiniteLossError::NonFiniteLossError(const std::string& what, json diagnostics)
		: std::runtime_error(what), diagnostics_(std::move(diagnostics))
{
}

torch::Tensor images_to_input(const torch::Tensor& images)
{
	expects(images.dim() == 5 && images.size(4) == 3, "images_to_input: expected [B,T,H,W,3]");
	return images.permute({0, 1, 4, 2, 3}).to(torch::kFloat32).div(255.0).sub(0.5).contiguous();
}

namespace
{

double scalar(const torch::Tensor& t)
{
	return t.detach().to(torch::kFloat64).item<double>();
}

torch::Tensor one_hot(const torch::Tensor& actions, int count)
{
	return torch::one_hot(actions.to(torch::kInt64), count).to(torch::kFloat32);
}

/// Batched start state for a chunk: carried rows where known, zeros (with is_first forced) elsewhere.
std::vector<LayerState> chunk_start_state(
	AgentImpl& agent, const ReplayChunk& chunk, const CarriedStateStore* carried, torch::Tensor& first_column)
{
	const auto batch = static_cast<int64_t>(chunk.start_index.size());
	const auto zero = agent.world->initial_state(1).layers;
	std::vector<std::vector<torch::Tensor>> h(zero.size());
	std::vector<std::vector<torch::Tensor>> z(zero.size());
	auto forced = first_column.clone();
	for (int64_t b = 0; b < batch; ++b)
	{
		std::optional<std::vector<LayerState>> found;
		if (carried != nullptr)
		{
			found = carried->fetch(chunk.start_index[b]);
		}
		if (!found)
		{
			forced[b] = 1.0F;
		}
		const auto& rows = found ? *found : zero;
		for (size_t k = 0; k < zero.size(); ++k)
		{
			h[k].push_back(rows[k].h);
			z[k].push_back(rows[k].z);
		}
	}
	first_column = forced;
	std::vector<LayerState> out;
	for (size_t k = 0; k < zero.size(); ++k)
	{
		out.push_back({torch::cat(h[k], 0), torch::cat(z[k], 0)});
	}
	return out;
}

/// Flattens [B, T, ...] layer states into [B*T, ...], keeping every stride-th row, detached.
std::vector<LayerState> entry_points(const std::vector<std::vector<LayerState>>& steps, int stride)
{
	std::vector<LayerState> out;
	const auto layers = steps.front().size();
	for (size_t k = 0; k < layers; ++k)
	{
		std::vector<torch::Tensor> h;
		std::vector<torch::Tensor> z;
		for (const auto& s : steps)
		{
			h.push_back(s[k].h.detach());
			z.push_back(s[k].z.detach());
		}
		auto hk = torch::stack(h, 1).flatten(0, 1);
		auto zk = torch::stack(z, 1).flatten(0, 1);
		if (stride > 1)
		{
			auto index = torch::arange(0, hk.size(0), stride, torch::kInt64);
			hk = hk.index_select(0, index);
			zk = zk.index_select(0, index);
		}
		out.push_back({hk, zk});
	}
	return out;
}

void check_finite(const char* name, const torch::Tensor& value, const json& metrics)
{
	if (!std::isfinite(scalar(value)))
	{
		throw NonFiniteLossError(std::string("non-finite ") + name + " loss", metrics);
	}
}

} // namespace

TrainLosses compute_losses(
	AgentImpl& agent, const ReplayChunk& chunk, const TrainConfig& config, RunState& run, const CarriedStateStore* carried)
{
	auto& world = agent.world;
	const auto& wc = world->config();
	const auto& scales = config.loss;
	const int64_t length = chunk.images.size(1);
	const int actions = agent.behavior_config().action_size;

	auto obs = images_to_input(chunk.images);
	auto action_1h = one_hot(chunk.actions, actions);
	auto is_first = chunk.is_first.clone();
	auto first_column = is_first.select(1, 0).contiguous();

	TrainLosses out;
	json metrics;

	// (2) representation learning over the replayed sequence
	HierState state;
	state.layers = chunk_start_state(agent, chunk, carried, first_column);
	is_first.select(1, 0).copy_(first_column);
	state.normalizers = agent.normalizers;
	auto hint_actions = agent.hint_actions(config.train.hint_actions, run.train_generator);

	const int layers = wc.layers;
	std::vector<torch::Tensor> rec(layers);
	std::vector<torch::Tensor> dyn(layers);
	std::vector<torch::Tensor> rep(layers);
	std::vector<double> kl(layers, 0.0);
	std::vector<double> rec_mse(layers, 0.0);
	std::vector<double> residual_energy(layers, 0.0);
	std::vector<double> hint_mean(layers, 0.0);
	std::vector<double> hint_std(layers, 0.0);
	int64_t traffic = 0;
	int transitions = 0;
	std::vector<std::vector<LayerState>> steps;
	std::vector<torch::Tensor> features;
	for (int64_t t = 0; t < length; ++t)
	{
		auto result = world->observe(
			state, action_1h.select(1, t), obs.select(1, t), is_first.select(1, t), Mode::kTrain, hint_actions, run.train_generator);
		for (int k = 0; k < layers; ++k)
		{
			const auto& step = result.layers[k];
			auto add = [](torch::Tensor& acc, const torch::Tensor& v) { acc = acc.defined() ? acc + v.mean() : v.mean(); };
			add(rec[k], step.losses.rec);
			add(dyn[k], step.losses.dyn);
			add(rep[k], step.losses.rep);
			kl[k] += scalar(step.kl.mean());
			rec_mse[k] += scalar(step.rec_mse);
			if (step.residual_input.defined())
			{
				residual_energy[k] += scalar(step.residual_input.abs().mean());
			}
			if (step.obs.hint.defined())
			{
				hint_mean[k] += scalar(step.obs.hint.mean());
				hint_std[k] += scalar(step.obs.hint.std());
			}
		}
		traffic = result.traffic_elements;
		transitions = result.rollout_transitions;
		state = std::move(result.state);
		steps.push_back(state.layers);
		features.push_back(agent.features(state.layers));
	}
	out.final_state = state.layers;
	out.normalizers = state.normalizers;

	torch::Tensor world_loss;
	for (int k = 0; k < layers; ++k)
	{
		auto layer_loss = (scales.rec * rec[k] + scales.dyn * dyn[k] + scales.rep * rep[k]) / static_cast<double>(length);
		world_loss = world_loss.defined() ? world_loss + layer_loss : layer_loss;
		const auto prefix = "l" + std::to_string(k) + "/";
		metrics[prefix + "rec"] = scalar(rec[k]) / length;
		metrics[prefix + "dyn"] = scalar(dyn[k]) / length;
		metrics[prefix + "rep"] = scalar(rep[k]) / length;
		metrics[prefix + "kl"] = kl[k] / length;
		metrics[prefix + "rec_mse"] = rec_mse[k] / length;
		if (k > 0 && wc.residual_enabled())
		{
			metrics[prefix + "residual_energy"] = residual_energy[k] / length;
		}
		if (wc.hints != HintMode::kOff)
		{
			metrics[prefix + "hint_mean"] = hint_mean[k] / length;
			metrics[prefix + "hint_std"] = hint_std[k] / length;
		}
	}
	out.world = world_loss;
	metrics["world_loss"] = scalar(world_loss);
	metrics["traffic"] = traffic;
	metrics["rollout_transitions"] = transitions;
	check_finite("world", out.world, metrics);

	// reward and continuation heads on replayed features
	out.replay_features = torch::stack(features, 1);
	const auto& codec = agent.reward->codec();
	const double mix = agent.reward->unimix();
	auto heads = heads_loss(
		agent.reward->forward(out.replay_features),
		agent.cont->forward(out.replay_features),
		chunk.rewards,
		chunk.continuation,
		codec,
		mix);
	out.heads = scales.reward * heads.reward.mean() + scales.cont * heads.cont.mean();
	metrics["reward_loss"] = scalar(heads.reward.mean());
	metrics["cont_loss"] = scalar(heads.cont.mean());
	check_finite("heads", out.heads, metrics);

	// (3)-(4) imagination from every replayed state
	const int horizon = config.actor_critic.imagination_horizon;
	auto starts = entry_points(steps, config.actor_critic.entry_stride);
	auto trajectory = world->imagine(starts, agent.actor_actions(run.train_generator), horizon, run.train_generator);
	std::vector<torch::Tensor> imagined;
	for (const auto& s : trajectory.states)
	{
		imagined.push_back(agent.features(s));
	}
	auto feats = torch::stack(imagined, 0); // [H+1, N, F], no graph
	auto taken = torch::stack(trajectory.actions, 0);

	torch::Tensor rewards;
	torch::Tensor continues;
	torch::Tensor slow_values;
	{
		torch::NoGradGuard no_grad;
		auto next = feats.slice(0, 1);
		rewards = agent.reward->mean(next);
		continues = agent.cont->probability(next);
		slow_values = agent.slow_critic->mean(feats);
	}
	const auto& params = config.actor_critic.returns;
	auto returns = lambda_returns(rewards, continues, slow_values, params.gamma, params.lambda);
	auto entry_cont = chunk.continuation.flatten();
	if (config.actor_critic.entry_stride > 1)
	{
		entry_cont = entry_cont.index_select(
			0, torch::arange(0, entry_cont.size(0), config.actor_critic.entry_stride, torch::kInt64));
	}
	// weight of step t: probability the imagined episode is still running there
	auto alive = torch::cat({entry_cont.unsqueeze(0), continues.slice(0, 0, horizon - 1)}, 0);
	auto weights = torch::cumprod(alive, 0).detach();

	agent.return_scale.update(returns);
	auto base = slow_values.slice(0, 0, horizon);
	auto probs = agent.actor->forward(feats.slice(0, 0, horizon));
	auto log_probs = torch::log((probs * taken).sum(-1));
	auto entropy = categorical_entropy(probs);
	auto actor = actor_loss(log_probs, entropy, returns, base, agent.return_scale, config.actor_critic.entropy_coeff, weights);
	out.actor = actor.loss;

	auto critic_logits = agent.critic->forward(feats.slice(0, 0, horizon));
	out.critic = critic_loss(critic_logits, returns, base, agent.critic->codec(), mix, scales.slow_reg, weights);

	metrics["actor_loss"] = scalar(actor.loss);
	metrics["actor_entropy"] = scalar(actor.entropy.mean());
	metrics["advantage_mean"] = scalar(actor.advantage.mean());
	metrics["return_scale"] = agent.return_scale.scale();
	metrics["critic_nll"] = scalar(out.critic);
	metrics["imagined_return"] = scalar(returns.mean());

	// replay value loss on stored features with real rewards and continuations
	if (length >= 2)
	{
		auto stored = out.replay_features.detach().transpose(0, 1); // [T, B, F]
		torch::Tensor replay_values;
		{
			torch::NoGradGuard no_grad;
			replay_values = agent.slow_critic->mean(stored);
		}
		auto next_first = chunk.is_first.slice(1, 1).transpose(0, 1);
		auto r = chunk.rewards.slice(1, 1).transpose(0, 1);
		auto c = chunk.continuation.slice(1, 1).transpose(0, 1);
		// a new episode at t+1 cuts the sequence; bootstrap from v_t there instead
		auto cut = next_first > 0.5F;
		auto boundary_value = replay_values.slice(0, 0, length - 1);
		r = torch::where(cut, boundary_value, r);
		c = torch::where(cut, torch::zeros_like(c), c);
		auto replay_returns = lambda_returns(r, c, replay_values, params.gamma, params.lambda);
		auto replay_logits = agent.critic->forward(stored.slice(0, 0, length - 1));
		auto replay_weights = (1.0 - next_first).detach();
		out.replay_value = critic_loss(
			replay_logits, replay_returns, boundary_value, agent.critic->codec(), mix, scales.slow_reg, replay_weights);
	}
	else
	{
		out.replay_value = torch::zeros({}, torch::kFloat32);
	}
	metrics["replay_value_loss"] = scalar(out.replay_value);

	out.total = out.world + out.heads + scales.policy * out.actor + scales.value * out.critic +
							scales.replay_value * out.replay_value;
	metrics["total_loss"] = scalar(out.total);

	check_finite("actor", out.actor, metrics);
	check_finite("critic", out.critic, metrics);
	check_finite("replay value", out.replay_value, metrics);
	out.metrics = std::move(metrics);
	return out;
}

namespace
{

/// Everything in a train step except the counters: sample, losses, optimiser steps, slow critic, carried states.
json apply_update(AgentImpl& agent, Optimizers& optimizers, ReplayBuffer& buffer, const TrainConfig& config, RunState& run)
{
	agent.train();
	auto chunk = buffer.sample(config.train.batch_size, config.train.batch_length, run.replay_rng);
	auto losses = compute_losses(agent, chunk, config, run, &buffer.carried_states());

	optimizers.zero_grad();
	losses.total.backward();
	auto norms = optimizers.step();
	slow_critic_update(agent.critic->parameters(), agent.slow_critic->parameters(), config.actor_critic.slow_critic_rate);
	agent.normalizers = losses.normalizers;

	const auto length = static_cast<uint64_t>(config.train.batch_length);
	for (size_t b = 0; b < chunk.start_index.size(); ++b)
	{
		std::vector<LayerState> row;
		for (const auto& s : losses.final_state)
		{
			row.push_back({s.h[static_cast<int64_t>(b)].unsqueeze(0), s.z[static_cast<int64_t>(b)].unsqueeze(0)});
		}
		buffer.carried_states().store(chunk.start_index[b] + length, row);
	}

	auto metrics = std::move(losses.metrics);
	for (size_t g = 0; g < norms.size(); ++g)
	{
		metrics["grad_norm/" + optimizers.names[g]] = norms[g];
	}
	metrics["kind"] = "train";
	return metrics;
}

} // namespace

json train_step(AgentImpl& agent, Optimizers& optimizers, ReplayBuffer& buffer, const TrainConfig& config, RunState& run)
{
	auto metrics = apply_update(agent, optimizers, buffer, config, run);
	++run.train_steps;
	metrics["train_steps"] = run.train_steps;
	metrics["env_steps"] = run.env_steps;
	return metrics;
}

uint64_t episode_seed(uint64_t base, int64_t episode)
{
	// splitmix64 finaliser over the pair
	uint64_t x = base * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(episode) + 0x632be59bd9b4e019ULL;
	x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
	x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
	return x ^ (x >> 31);
}

Collector::Collector(const TrainConfig& config, uint64_t seed_base)
		: config_(config), seed_base_(seed_base), env_(make_env(config.env)), stage_episodes_(config.env.num_envs > 1)
{
}

void Collector::begin_episode(int64_t episode)
{
	episode_ = episode;
	pending_ = env_->reset(episode_seed(seed_base_, episode));
	pending_action_ = 0;
	state_valid_ = false;
	score_ = 0.0;
	length_ = 0;
}

std::optional<EpisodeSummary> Collector::step(AgentImpl* policy, ReplayBuffer& buffer, at::Generator& generator, int64_t& episodes)
{
	if (!pending_)
	{
		begin_episode(episodes++);
	}
	const auto& current = *pending_;
	StepRecord record{
		current.image,
		pending_action_,
		static_cast<float>(current.reward),
		current.is_first,
		current.is_last,
		current.is_terminal,
		current.continuation()};

	int action = 0;
	if (policy != nullptr)
	{
		torch::NoGradGuard no_grad;
		if (!state_valid_)
		{
			state_ = policy->initial_state(1);
		}
		auto image = torch::from_blob(
										 const_cast<uint8_t*>(current.image.data()), {1, 1, current.height, current.width, 3}, torch::kUInt8)
										 .clone();
		auto obs = images_to_input(image).select(1, 0);
		auto prev = one_hot(torch::tensor({pending_action_}), policy->behavior_config().action_size);
		auto first = torch::tensor({current.is_first || !state_valid_ ? 1.0F : 0.0F});
		state_.normalizers = policy->normalizers;
		auto hints = policy->hint_actions(config_.train.hint_actions, generator);
		auto result = policy->world->observe(state_, prev, obs, first, Mode::kEval, hints, generator);
		if (on_observe)
		{
			on_observe(result, current, episode_, length_);
		}
		state_ = std::move(result.state);
		state_valid_ = true;
		auto probs = policy->actor->forward(policy->features(state_.layers));
		action = static_cast<int>(policy->actor->sample(probs, generator).argmax(-1).item<int64_t>());
	}
	else
	{
		auto draw = torch::randint(env_->action_count(), {1}, generator, torch::kInt64);
		action = static_cast<int>(draw.item<int64_t>());
		state_valid_ = false;
	}

	score_ += current.reward;
	const bool last = current.is_last;
	const bool terminal = current.is_terminal;
	if (stage_episodes_)
	{
		staged_.push_back(std::move(record));
		if (last)
		{
			for (auto& r : staged_)
			{
				buffer.append(std::move(r));
			}
			staged_.clear();
		}
	}
	else
	{
		buffer.append(std::move(record));
	}

	if (last)
	{
		EpisodeSummary summary{episode_, score_, length_, !terminal};
		pending_.reset();
		state_valid_ = false;
		return summary;
	}
	pending_ = env_->step(action);
	pending_action_ = action;
	++length_;
	return std::nullopt;
}

json EvalSummary::to_json() const
{
	return {{"episodes", episodes}, {"success_rate", success_rate}, {"mean_score", mean_score}, {"mean_length", mean_length}};
}

EvalSummary evaluate(AgentImpl* agent, const TrainConfig& config, int episodes, uint64_t seed, const EvalHooks& hooks)
{
	expects(episodes >= 1, "evaluate: at least one episode required");
	EvalSummary summary;
	summary.episodes = episodes;
	auto generator = at::make_generator<at::CPUGeneratorImpl>(seed);
	if (agent != nullptr)
	{
		agent->eval();
	}
	auto eval_config = config;
	eval_config.env.num_envs = 1;
	// eval episodes never touch the training buffer; a small scratch buffer absorbs the appended steps
	ReplayBuffer scratch(1024, config.env.height, config.env.width);
	ReplayBuffer* sink = hooks.record != nullptr ? hooks.record : &scratch;
	Collector collector(eval_config, seed ^ 0xa5a5a5a5a5a5a5a5ULL);
	collector.on_observe = hooks.on_observe;
	int64_t counter = 0;
	while (static_cast<int>(summary.per_episode.size()) < episodes)
	{
		auto done = collector.step(agent, *sink, generator, counter);
		if (done)
		{
			summary.per_episode.push_back(*done);
		}
	}
	for (const auto& e : summary.per_episode)
	{
		summary.success_rate += e.success ? 1.0 : 0.0;
		summary.mean_score += e.score;
		summary.mean_length += static_cast<double>(e.length);
	}
	summary.success_rate /= episodes;
	summary.mean_score /= episodes;
	summary.mean_length /= episodes;
	return summary;
}

MetricsWriter::MetricsWriter(const fs::path& path, bool wallclock)
		: out_(path, std::ios::app), wallclock_(wallclock), start_(std::chrono::steady_clock::now())
{
	if (!out_)
	{
		throw std::runtime_error("metrics: cannot open " + path.string());
	}
}

void MetricsWriter::write(json record)
{
	std::lock_guard lock(mutex_);
	if (wallclock_)
	{
		record["wallclock"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
	}
	out_ << record.dump() << '\n';
	out_.flush();
}

json RunSummary::to_json() const
{
	json ckpts = json::array();
	for (const auto& c : checkpoints)
	{
		ckpts.push_back(c.string());
	}
	json out{
		{"env_steps", env_steps}, {"train_steps", train_steps}, {"episodes", episodes}, {"checkpoints", ckpts}, {"aborted", aborted}};
	if (last_eval)
	{
		out["eval"] = last_eval->to_json();
	}
	return out;
}

namespace
{

/// Keeps only records written up to `env_steps`, dropping what a killed run logged after its last checkpoint.
void truncate_metrics(const fs::path& path, int64_t env_steps)
{
	if (!fs::exists(path))
	{
		return;
	}
	std::vector<std::string> keep;
	{
		std::ifstream in(path);
		std::string line;
		while (std::getline(in, line))
		{
			auto record = json::parse(line, nullptr, false);
			if (record.is_discarded())
			{
				continue;
			}
			if (record.value("env_steps", int64_t{0}) <= env_steps)
			{
				keep.push_back(line);
			}
		}
	}
	std::ofstream out(path, std::ios::trunc);
	for (const auto& line : keep)
	{
		out << line << '\n';
	}
}

struct RunContext
{
	RunContext(const TrainConfig& c, const RunOptions& o) : config(c), options(o), run(c.seed) {}

	const TrainConfig& config;
	const RunOptions& options;
	Agent agent{nullptr};
	Optimizers optimizers;
	std::unique_ptr<ReplayBuffer> buffer;
	RunState run;
	std::unique_ptr<MetricsWriter> metrics;
	RunSummary summary;
	int64_t train_start = 0;
	double per_train = 1.0;

	int64_t allowed_train_steps(int64_t env_steps) const
	{
		if (env_steps < train_start)
		{
			return 0;
		}
		return static_cast<int64_t>(std::floor(static_cast<double>(env_steps - train_start) / per_train)) + 1;
	}

	void checkpoint()
	{
		const auto dir = options.logdir / "ckpt" / std::to_string(run.env_steps);
		save_checkpoint(dir, config, *agent, &optimizers, run);
		if (config.train.save_replay)
		{
			buffer->save(options.logdir / "replay");
		}
		summary.checkpoints.push_back(dir);
	}

	void eval()
	{
		auto snapshot = agent->clone_snapshot();
		auto result = evaluate(snapshot.get(), config, config.train.eval_episodes, episode_seed(config.seed, run.env_steps));
		auto record = result.to_json();
		record["kind"] = "eval";
		record["env_steps"] = run.env_steps;
		record["train_steps"] = run.train_steps;
		metrics->write(record);
		summary.last_eval = result;
	}

	bool due(int64_t every) const { return every > 0 && run.env_steps % every == 0; }
};

void write_episode(MetricsWriter& metrics, const EpisodeSummary& e, int64_t env_steps, int64_t train_steps)
{
	metrics.write(
		{{"kind", "episode"},
		 {"episode", e.episode},
		 {"score", e.score},
		 {"length", e.length},
		 {"success", e.success},
		 {"env_steps", env_steps},
		 {"train_steps", train_steps}});
}

void run_synchronous(RunContext& ctx)
{
	const auto& cfg = ctx.config;
	Collector collector(cfg, cfg.seed);
	auto snapshot = ctx.agent->clone_snapshot();
	while (ctx.run.env_steps < cfg.train.env_steps)
	{
		AgentImpl* policy = ctx.run.env_steps < ctx.train_start ? nullptr : snapshot.get();
		auto done = collector.step(policy, *ctx.buffer, ctx.run.collect_generator, ctx.run.episodes);
		++ctx.run.env_steps;
		if (done)
		{
			write_episode(*ctx.metrics, *done, ctx.run.env_steps, ctx.run.train_steps);
		}
		while (ctx.run.train_steps < ctx.allowed_train_steps(ctx.run.env_steps))
		{
			ctx.metrics->write(train_step(*ctx.agent, ctx.optimizers, *ctx.buffer, cfg, ctx.run));
			if (ctx.run.train_steps % cfg.train.snapshot_every == 0)
			{
				snapshot->copy_from(*ctx.agent);
			}
		}
		if (ctx.options.abort_at_env_step >= 0 && ctx.run.env_steps >= ctx.options.abort_at_env_step)
		{
			ctx.summary.aborted = true;
			return;
		}
		if (ctx.due(cfg.train.eval_every))
		{
			ctx.eval();
		}
		if (ctx.due(cfg.train.checkpoint_every) || ctx.run.env_steps == cfg.train.env_steps)
		{
			ctx.checkpoint();
		}
	}
}

void run_asynchronous(RunContext& ctx)
{
	const auto& cfg = ctx.config;
	// the collector keeps at most this many train steps' worth of env steps ahead of the trainer
	const int64_t slack = 4;
	auto next_multiple = [](int64_t now, int64_t every) { return every > 0 ? (now / every + 1) * every : int64_t{-1}; };
	int64_t next_eval = next_multiple(ctx.run.env_steps, cfg.train.eval_every);
	int64_t next_ckpt = next_multiple(ctx.run.env_steps, cfg.train.checkpoint_every);
	auto next_barrier = [&]() {
		int64_t b = -1;
		for (auto v : {next_eval, next_ckpt})
		{
			if (v > 0 && (b < 0 || v < b))
			{
				b = v;
			}
		}
		return b;
	};

	std::mutex mutex; // guards the shared counters in ctx.run and the snapshot exchange
	std::condition_variable cv;
	std::shared_ptr<AgentImpl> published = ctx.agent->clone_snapshot();
	uint64_t published_version = 1;
	int64_t barrier = next_barrier(); // the collector pauses here until evals/checkpoints are done
	bool stop = false;
	bool collector_done = false;
	std::exception_ptr collector_error;
	auto aborting = [&](int64_t e) { return ctx.options.abort_at_env_step >= 0 && e >= ctx.options.abort_at_env_step; };

	std::thread collector_thread([&]() {
		try
		{
			Collector collector(cfg, cfg.seed);
			auto policy = ctx.agent->clone_snapshot();
			uint64_t version = 0;
			while (true)
			{
				{
					std::unique_lock lock(mutex);
					cv.wait(lock, [&]() {
						const auto e = ctx.run.env_steps;
						const bool rate_ok = e < ctx.train_start || ctx.allowed_train_steps(e) <= ctx.run.train_steps + slack;
						return stop || (rate_ok && (barrier < 0 || e < barrier));
					});
					if (stop || ctx.run.env_steps >= cfg.train.env_steps || aborting(ctx.run.env_steps))
					{
						break;
					}
					if (published_version != version)
					{
						policy->copy_from(*published);
						version = published_version;
					}
				}
				// only this thread touches the environment, the collect generator and the episode counter
				AgentImpl* acting = ctx.run.env_steps < ctx.train_start ? nullptr : policy.get();
				auto done = collector.step(acting, *ctx.buffer, ctx.run.collect_generator, ctx.run.episodes);
				int64_t now = 0;
				int64_t trained = 0;
				{
					std::lock_guard lock(mutex);
					now = ++ctx.run.env_steps;
					trained = ctx.run.train_steps;
				}
				if (done)
				{
					write_episode(*ctx.metrics, *done, now, trained);
				}
				cv.notify_all();
			}
		}
		catch (...)
		{
			collector_error = std::current_exception();
		}
		{
			std::lock_guard lock(mutex);
			collector_done = true;
		}
		cv.notify_all();
	});

	auto finish = [&]() {
		{
			std::lock_guard lock(mutex);
			stop = true;
		}
		cv.notify_all();
		collector_thread.join();
	};

	try
	{
		while (true)
		{
			int64_t env_now = 0;
			bool train_due = false;
			bool barrier_due = false;
			{
				std::unique_lock lock(mutex);
				cv.wait(lock, [&]() {
					return collector_done || ctx.allowed_train_steps(ctx.run.env_steps) > ctx.run.train_steps ||
								 (barrier >= 0 && ctx.run.env_steps >= barrier);
				});
				env_now = ctx.run.env_steps;
				train_due = ctx.allowed_train_steps(env_now) > ctx.run.train_steps;
				barrier_due = !train_due && barrier >= 0 && env_now >= barrier;
				if (!train_due && !barrier_due && collector_done)
				{
					break;
				}
			}
			if (train_due)
			{
				// the trainer owns replay_rng and train_generator; counters are shared under the mutex
				auto metrics = apply_update(*ctx.agent, ctx.optimizers, *ctx.buffer, cfg, ctx.run);
				int64_t done_steps = 0;
				{
					std::lock_guard lock(mutex);
					done_steps = ++ctx.run.train_steps;
				}
				metrics["train_steps"] = done_steps;
				metrics["env_steps"] = env_now;
				ctx.metrics->write(metrics);
				if (done_steps % cfg.train.snapshot_every == 0)
				{
					auto fresh = ctx.agent->clone_snapshot();
					std::lock_guard lock(mutex);
					published = std::move(fresh);
					++published_version;
				}
				cv.notify_all();
				continue;
			}
			// the collector is parked at the barrier, so the run state is stable here
			if (!aborting(env_now))
			{
				if (env_now == next_eval)
				{
					ctx.eval();
				}
				if (env_now == next_ckpt || env_now == cfg.train.env_steps)
				{
					ctx.checkpoint();
				}
			}
			{
				std::lock_guard lock(mutex);
				next_eval = next_eval > 0 && env_now >= next_eval ? next_multiple(env_now, cfg.train.eval_every) : next_eval;
				next_ckpt = next_ckpt > 0 && env_now >= next_ckpt ? next_multiple(env_now, cfg.train.checkpoint_every) : next_ckpt;
				barrier = next_barrier();
			}
			cv.notify_all();
		}
	}
	catch (...)
	{
		finish();
		throw;
	}
	finish();
	if (collector_error)
	{
		std::rethrow_exception(collector_error);
	}
	if (aborting(ctx.run.env_steps) && ctx.run.env_steps < cfg.train.env_steps)
	{
		ctx.summary.aborted = true;
		return;
	}
	const auto final_name = std::to_string(ctx.run.env_steps);
	if (ctx.summary.checkpoints.empty() || ctx.summary.checkpoints.back().filename() != final_name)
	{
		ctx.checkpoint();
	}
}

} // namespace

RunSummary run(const TrainConfig& config, const RunOptions& options)
{
	expects(!options.logdir.empty(), "run: logdir required");
	fs::create_directories(options.logdir);

	RunContext ctx(config, options);
	ctx.agent = make_agent(config);
	ctx.optimizers = make_optimizers(*ctx.agent, config.train.learning_rate, config.train.adam_eps, config.train.grad_clip);
	ctx.per_train = config.env_steps_per_train_step();
	ctx.train_start = std::max<int64_t>(config.train.prefill, config.train.batch_length);
	const auto capacity = static_cast<size_t>(config.train.buffer_size);

	const auto metrics_path = options.logdir / "metrics.jsonl";
	std::optional<fs::path> resume_from;
	if (options.resume)
	{
		resume_from = latest_checkpoint(options.logdir);
	}
	if (resume_from)
	{
		const auto manifest = read_manifest(*resume_from);
		if (manifest.at("config_hash").get<std::string>() != config_hash(config.source))
		{
			throw ContractError("run: checkpoint " + resume_from->string() + " was written with a different config");
		}
		load_checkpoint(*resume_from, *ctx.agent, &ctx.optimizers, &ctx.run);
		const auto replay_dir = options.logdir / "replay";
		ctx.buffer = fs::exists(replay_dir) ? ReplayBuffer::load(replay_dir, capacity)
																				: std::make_unique<ReplayBuffer>(capacity, config.env.height, config.env.width);
		truncate_metrics(metrics_path, ctx.run.env_steps);
	}
	else
	{
		ctx.buffer = std::make_unique<ReplayBuffer>(capacity, config.env.height, config.env.width);
		if (fs::exists(metrics_path))
		{
			fs::remove(metrics_path);
		}
	}
	ctx.metrics = std::make_unique<MetricsWriter>(metrics_path, !config.train.synchronous);
	{
		std::ofstream out(options.logdir / "config.json");
		out << config.source.dump(2) << '\n';
	}

	try
	{
		if (config.train.synchronous)
		{
			run_synchronous(ctx);
		}
		else
		{
			run_asynchronous(ctx);
		}
	}
	catch (const NonFiniteLossError& e)
	{
		std::ofstream out(options.logdir / "diagnostic.json");
		out << json{{"error", e.what()}, {"metrics", e.diagnostics()}, {"env_steps", ctx.run.env_steps}, {"train_steps", ctx.run.train_steps}}
						 .dump(2)
				<< '\n';
		throw;
	}

	ctx.summary.env_steps = ctx.run.env_steps;
	ctx.summary.train_steps = ctx.run.train_steps;
	ctx.summary.episodes = ctx.run.episodes;
	return ctx.summary;
}

} // namespace resdreamer
