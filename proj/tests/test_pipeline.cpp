#include "resdreamer/agent.h"
#include "resdreamer/checkpoint.h"
#include "resdreamer/errors.h"
#include "resdreamer/pipeline.h"

#include "testing.h"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

namespace resdreamer
{
namespace
{

namespace fs = std::filesystem;
using json = nlohmann::json;

std::vector<json> read_metrics(const fs::path& path, const std::string& kind = "")
{
	std::vector<json> out;
	std::ifstream in(path);
	std::string line;
	while (std::getline(in, line))
	{
		auto record = json::parse(line);
		if (kind.empty() || record.value("kind", "") == kind)
		{
			out.push_back(record);
		}
	}
	return out;
}

/// Fills a buffer with `steps` uniformly random transitions.
void prefill(const TrainConfig& config, ReplayBuffer& buffer, int64_t steps, uint64_t seed)
{
	Collector collector(config, seed);
	auto gen = testing::generator(seed);
	int64_t episodes = 0;
	for (int64_t i = 0; i < steps; ++i)
	{
		collector.step(nullptr, buffer, gen, episodes);
	}
}

std::unique_ptr<ReplayBuffer> filled_buffer(const TrainConfig& config, int64_t steps, uint64_t seed = 7)
{
	auto buffer = std::make_unique<ReplayBuffer>(
		static_cast<size_t>(config.train.buffer_size), config.env.height, config.env.width);
	prefill(config, *buffer, steps, seed);
	return buffer;
}

/// Metrics with the entries that may legitimately differ between otherwise identical runs removed.
json comparable(json record)
{
	record.erase("wallclock");
	return record;
}

std::vector<torch::Tensor> parameters_of(const std::vector<torch::Tensor>& group)
{
	std::vector<torch::Tensor> out;
	for (const auto& p : group)
	{
		if (p.requires_grad())
		{
			out.push_back(p);
		}
	}
	return out;
}

/// Largest gradient magnitude of `loss` over `params`; unreachable parameters count as zero.
double reach(const torch::Tensor& loss, const std::vector<torch::Tensor>& params)
{
	auto grads = torch::autograd::grad({loss}, params, {}, /*retain_graph=*/true, false, /*allow_unused=*/true);
	double out = 0.0;
	for (const auto& g : grads)
	{
		if (g.defined())
		{
			out = std::max(out, testing::max_abs(g));
		}
	}
	return out;
}

TEST(Pipeline, ImagesToInputLayoutAndRange)
{
	auto images = torch::zeros({1, 2, 4, 5, 3}, torch::kUInt8);
	images[0][1][2][3][1] = 255;
	auto x = images_to_input(images);
	EXPECT_EQ(x.sizes(), (std::vector<int64_t>{1, 2, 3, 4, 5}));
	EXPECT_EQ(x.scalar_type(), torch::kFloat32);
	EXPECT_FLOAT_EQ(x[0][1][1][2][3].item<float>(), 0.5F);
	EXPECT_FLOAT_EQ(x[0][0][0][0][0].item<float>(), -0.5F);
	EXPECT_FLOAT_EQ(x.max().item<float>(), 0.5F);
	EXPECT_FLOAT_EQ(x.min().item<float>(), -0.5F);
}

TEST(Pipeline, CollectorAppendsOneStepPerCall)
{
	auto config = testing::tiny_config({"env.id=constant", "env.constant_episode_length=5"});
	ReplayBuffer buffer(100, 16, 16);
	Collector collector(config, 3);
	auto gen = testing::generator(3);
	int64_t episodes = 0;
	int finished = 0;
	for (int i = 0; i < 12; ++i)
	{
		auto done = collector.step(nullptr, buffer, gen, episodes);
		EXPECT_EQ(buffer.size(), static_cast<size_t>(i + 1));
		if (done)
		{
			++finished;
			EXPECT_EQ(done->length, 5);
			EXPECT_TRUE(done->success);
		}
	}
	// episodes of 5 steps occupy 6 records: the reset observation plus five transitions
	EXPECT_EQ(finished, 2);
	EXPECT_EQ(episodes, 2);
	EXPECT_TRUE(buffer.at(0).is_first);
	EXPECT_TRUE(buffer.at(5).is_last);
	EXPECT_TRUE(buffer.at(6).is_first);
	EXPECT_FALSE(buffer.at(6).is_last);
}

TEST(Pipeline, CollectorWithPolicyTracksState)
{
	auto config = testing::tiny_config();
	auto agent = make_agent(config);
	ReplayBuffer buffer(1000, 16, 16);
	Collector collector(config, 5);
	auto gen = testing::generator(5);
	int64_t episodes = 0;
	int observed = 0;
	collector.on_observe = [&](const ObserveResult& r, const EnvStep&, int64_t, int64_t step) {
		EXPECT_EQ(step, observed);
		EXPECT_EQ(r.layers.size(), 2U);
		++observed;
	};
	for (int i = 0; i < 10; ++i)
	{
		if (collector.step(agent.get(), buffer, gen, episodes))
		{
			break;
		}
	}
	EXPECT_EQ(observed, static_cast<int>(buffer.size()));
	ASSERT_EQ(collector.state().layers.size(), 2U);
	EXPECT_EQ(collector.state().layers[0].h.size(0), 1);
}

TEST(Pipeline, TrainStepIsDeterministic)
{
	auto config = testing::tiny_config();
	auto buffer = filled_buffer(config, 200);
	std::vector<json> records[2];
	for (auto& out : records)
	{
		auto agent = make_agent(config);
		auto optimizers = make_optimizers(*agent, 1e-3, 1e-8, 1000.0);
		RunState run(config.seed);
		auto copy = filled_buffer(config, 200);
		for (int i = 0; i < 3; ++i)
		{
			out.push_back(train_step(*agent, optimizers, *copy, config, run));
		}
	}
	for (int i = 0; i < 3; ++i)
	{
		EXPECT_EQ(records[0][i], records[1][i]) << i;
	}
	const auto& m = records[0][0];
	for (const char* key :
			 {"world_loss", "traffic", "rollout_transitions", "reward_loss", "cont_loss", "actor_loss", "actor_entropy",
				"critic_nll", "replay_value_loss", "total_loss", "l0/rec", "l1/rec", "l1/residual_energy", "l0/hint_mean",
				"grad_norm/world0", "grad_norm/world1", "grad_norm/actor", "grad_norm/critic"})
	{
		EXPECT_TRUE(m.contains(key)) << key;
	}
	EXPECT_EQ(m["kind"], "train");
	EXPECT_EQ(records[0][2]["train_steps"], 3);
	EXPECT_TRUE(std::isfinite(m["total_loss"].get<double>()));
	// (L-1)(F+1) hw3 per batch row
	EXPECT_EQ(m["traffic"].get<int64_t>(), 1 * (4 + 1) * 16 * 16 * 3);
}

TEST(Pipeline, GradientRoutingAudit)
{
	auto config = testing::tiny_config();
	auto buffer = filled_buffer(config, 200);
	auto agent = make_agent(config);
	agent->train();
	RunState run(config.seed);
	auto chunk = buffer->sample(config.train.batch_size, config.train.batch_length, run.replay_rng);
	auto losses = compute_losses(*agent, chunk, config, run, &buffer->carried_states());

	std::vector<torch::Tensor> world;
	for (int k = 0; k < config.hrssm.layers; ++k)
	{
		auto g = parameters_of(agent->world_group(k));
		world.insert(world.end(), g.begin(), g.end());
	}
	auto world_only = parameters_of(agent->world->parameters());
	auto actor = parameters_of(agent->actor->parameters());
	auto critic = parameters_of(agent->critic->parameters());
	for (const auto& p : agent->slow_critic->parameters())
	{
		EXPECT_FALSE(p.requires_grad());
	}

	EXPECT_EQ(reach(losses.actor, world), 0.0);
	EXPECT_EQ(reach(losses.actor, critic), 0.0);
	EXPECT_GT(reach(losses.actor, actor), 0.0);

	EXPECT_EQ(reach(losses.critic, world), 0.0);
	EXPECT_EQ(reach(losses.critic, actor), 0.0);
	EXPECT_GT(reach(losses.critic, critic), 0.0);

	EXPECT_EQ(reach(losses.replay_value, world), 0.0);
	EXPECT_EQ(reach(losses.replay_value, actor), 0.0);
	EXPECT_GT(reach(losses.replay_value, critic), 0.0);

	EXPECT_EQ(reach(losses.world, actor), 0.0);
	EXPECT_EQ(reach(losses.world, critic), 0.0);
	EXPECT_GT(reach(losses.world, world_only), 0.0);

	EXPECT_GT(reach(losses.heads, world_only), 0.0);
	EXPECT_EQ(reach(losses.heads, actor), 0.0);
	EXPECT_EQ(reach(losses.heads, critic), 0.0);
}

TEST(Pipeline, NonFiniteLossIsReported)
{
	auto config = testing::tiny_config();
	auto buffer = filled_buffer(config, 200);
	auto agent = make_agent(config);
	{
		torch::NoGradGuard no_grad;
		agent->reward->parameters()[0].fill_(std::numeric_limits<float>::quiet_NaN());
	}
	auto optimizers = make_optimizers(*agent, 1e-3, 1e-8, 1000.0);
	RunState run(config.seed);
	try
	{
		train_step(*agent, optimizers, *buffer, config, run);
		FAIL() << "expected NonFiniteLossError";
	}
	catch (const NonFiniteLossError& e)
	{
		EXPECT_TRUE(e.diagnostics().contains("world_loss"));
		EXPECT_FALSE(std::isfinite(e.diagnostics()["reward_loss"].get<double>()));
	}
	EXPECT_EQ(run.train_steps, 0);
}

TEST(Pipeline, CheckpointResumeReproducesTraining)
{
	auto config = testing::tiny_config();
	auto dir = testing::scratch_dir("pipeline_ckpt");
	auto agent = make_agent(config);
	auto optimizers = make_optimizers(*agent, 1e-3, 1e-8, 1000.0);
	RunState run(config.seed);
	filled_buffer(config, 300)->save(dir / "replay");
	auto buffer = ReplayBuffer::load(dir / "replay", 5000);
	for (int i = 0; i < 2; ++i)
	{
		train_step(*agent, optimizers, *buffer, config, run);
	}
	save_checkpoint(dir / "ckpt" / "2", config, *agent, &optimizers, run);

	// carried states are not persisted, so both branches continue from fresh copies of the same replay
	auto continue_from = [&](AgentImpl& a, Optimizers& o, RunState& r) {
		auto b = ReplayBuffer::load(dir / "replay", 5000);
		std::vector<json> out;
		for (int i = 0; i < 3; ++i)
		{
			out.push_back(comparable(train_step(a, o, *b, config, r)));
		}
		return out;
	};
	auto expected = continue_from(*agent, optimizers, run);

	auto restored = make_agent(testing::tiny_config({"seed=99"}));
	auto restored_opt = make_optimizers(*restored, 1e-3, 1e-8, 1000.0);
	RunState restored_run(99);
	auto latest = latest_checkpoint(dir);
	ASSERT_TRUE(latest.has_value());
	EXPECT_EQ(latest->filename(), "2");
	load_checkpoint(*latest, *restored, &restored_opt, &restored_run);
	EXPECT_EQ(restored_run.train_steps, 2);
	EXPECT_EQ(checkpoint_config(*latest).source, config.source);
	auto actual = continue_from(*restored, restored_opt, restored_run);
	for (size_t i = 0; i < expected.size(); ++i)
	{
		EXPECT_EQ(expected[i], actual[i]) << i;
	}
}

TEST(Pipeline, CorruptCheckpointIsRejected)
{
	auto config = testing::tiny_config();
	auto dir = testing::scratch_dir("pipeline_bad_ckpt");
	auto agent = make_agent(config);
	RunState run(config.seed);
	save_checkpoint(dir, config, *agent, nullptr, run);
	auto manifest = read_manifest(dir);
	manifest["version"] = kCheckpointFormatVersion + 1;
	std::ofstream(dir / "manifest.json") << manifest.dump();
	EXPECT_ANY_THROW(load_checkpoint(dir, *agent, nullptr, nullptr));

	auto other = make_agent(testing::tiny_config({"hrssm.layers=3"}));
	auto good = testing::scratch_dir("pipeline_arch_ckpt");
	save_checkpoint(good, config, *agent, nullptr, run);
	EXPECT_ANY_THROW(load_checkpoint(good, *other, nullptr, nullptr));
}

TEST(Pipeline, RunHonoursTrainRatioAndCheckpointSchedule)
{
	auto config = testing::tiny_config(
		{"train.env_steps=200", "train.checkpoint_every=100", "train.train_ratio=8", "env.id=constant",
		 "env.constant_episode_length=30"});
	auto dir = testing::scratch_dir("pipeline_run");
	auto summary = run(config, {dir});
	EXPECT_EQ(summary.env_steps, 200);
	EXPECT_FALSE(summary.aborted);
	// per_train = 2*8/8 = 2, train_start = 32: floor((200-32)/2)+1
	EXPECT_EQ(summary.train_steps, 85);
	ASSERT_EQ(summary.checkpoints.size(), 2U);
	EXPECT_EQ(summary.checkpoints[0].filename(), "100");
	EXPECT_EQ(summary.checkpoints[1].filename(), "200");
	EXPECT_TRUE(fs::exists(dir / "ckpt" / "200" / "params.bin"));
	EXPECT_TRUE(fs::exists(dir / "replay"));

	auto train = read_metrics(dir / "metrics.jsonl", "train");
	ASSERT_EQ(train.size(), 85U);
	EXPECT_EQ(train.front()["env_steps"], 32);
	EXPECT_EQ(train.back()["train_steps"], 85);
	for (const auto& r : train)
	{
		for (const char* key : {"world_loss", "reward_loss", "cont_loss", "actor_loss", "critic_nll", "replay_value_loss"})
		{
			ASSERT_TRUE(std::isfinite(r[key].get<double>())) << key << " at train step " << r["train_steps"];
		}
	}
	auto episodes = read_metrics(dir / "metrics.jsonl", "episode");
	EXPECT_EQ(episodes.size(), 200U / 31U);
	// the world model learns the constant frame
	double early = 0.0;
	double late = 0.0;
	for (int i = 0; i < 10; ++i)
	{
		early += train[static_cast<size_t>(i)]["l0/rec_mse"].get<double>();
		late += train[train.size() - 1 - static_cast<size_t>(i)]["l0/rec_mse"].get<double>();
	}
	EXPECT_LT(late, early);
}

TEST(Pipeline, AsynchronousRunReachesSameCounters)
{
	auto config = testing::tiny_config(
		{"train.env_steps=120", "train.checkpoint_every=60", "train.eval_every=60", "train.train_ratio=8",
		 "train.synchronous=false"});
	auto dir = testing::scratch_dir("pipeline_async");
	auto summary = run(config, {dir});
	EXPECT_EQ(summary.env_steps, 120);
	// floor((120-32)/2)+1
	EXPECT_EQ(summary.train_steps, 45);
	ASSERT_EQ(summary.checkpoints.size(), 2U);
	EXPECT_EQ(summary.checkpoints[0].filename(), "60");
	EXPECT_EQ(summary.checkpoints[1].filename(), "120");
	auto evals = read_metrics(dir / "metrics.jsonl", "eval");
	ASSERT_EQ(evals.size(), 2U);
	EXPECT_EQ(evals[0]["env_steps"], 60);
	auto train = read_metrics(dir / "metrics.jsonl", "train");
	ASSERT_EQ(train.size(), 45U);
	for (const auto& r : train)
	{
		EXPECT_TRUE(r.contains("wallclock"));
	}
}

TEST(Pipeline, KilledRunResumesWithSameRecordStream)
{
	auto base = std::vector<std::string>{
		"train.env_steps=160", "train.checkpoint_every=80", "train.train_ratio=8", "train.prefill=40"};
	auto config = testing::tiny_config(base);
	auto full_dir = testing::scratch_dir("pipeline_full");
	auto full = run(config, {full_dir});

	auto killed_dir = testing::scratch_dir("pipeline_killed");
	RunOptions kill{killed_dir};
	kill.abort_at_env_step = 120;
	auto partial = run(config, kill);
	EXPECT_TRUE(partial.aborted);
	EXPECT_EQ(partial.env_steps, 120);
	ASSERT_EQ(partial.checkpoints.size(), 1U);

	RunOptions resume{killed_dir};
	resume.resume = true;
	auto resumed = run(config, resume);
	EXPECT_FALSE(resumed.aborted);
	EXPECT_EQ(resumed.env_steps, full.env_steps);
	EXPECT_EQ(resumed.train_steps, full.train_steps);
	EXPECT_TRUE(fs::exists(killed_dir / "ckpt" / "160"));

	auto a = read_metrics(full_dir / "metrics.jsonl", "train");
	auto b = read_metrics(killed_dir / "metrics.jsonl", "train");
	ASSERT_EQ(a.size(), b.size());
	std::set<int64_t> seen;
	for (size_t i = 0; i < a.size(); ++i)
	{
		EXPECT_EQ(a[i]["train_steps"], b[i]["train_steps"]);
		EXPECT_EQ(a[i]["env_steps"], b[i]["env_steps"]);
		std::set<std::string> keys_a;
		std::set<std::string> keys_b;
		for (const auto& [k, v] : a[i].items())
		{
			keys_a.insert(k);
		}
		for (const auto& [k, v] : b[i].items())
		{
			keys_b.insert(k);
		}
		EXPECT_EQ(keys_a, keys_b);
		EXPECT_TRUE(seen.insert(b[i]["train_steps"].get<int64_t>()).second);
	}
	// records up to the checkpoint are untouched by the resume
	for (size_t i = 0; i < a.size() && a[i]["env_steps"].get<int64_t>() <= 80; ++i)
	{
		EXPECT_EQ(comparable(a[i]), comparable(b[i])) << i;
	}

	auto other = testing::tiny_config(base);
	other.source["seed"] = 5;
	EXPECT_THROW(run(config_from_json(other.source), resume), ContractError);
}

TEST(Pipeline, EvaluateIsDeterministicPerSeed)
{
	auto config = testing::tiny_config();
	auto agent = make_agent(config);
	auto a = evaluate(agent.get(), config, 2, 11);
	auto b = evaluate(agent.get(), config, 2, 11);
	EXPECT_EQ(a.to_json(), b.to_json());
	for (int i = 0; i < 2; ++i)
	{
		EXPECT_EQ(a.per_episode[i].length, b.per_episode[i].length);
		EXPECT_EQ(a.per_episode[i].score, b.per_episode[i].score);
	}
	EXPECT_THROW(evaluate(agent.get(), config, 0, 11), ContractError);

	auto random = evaluate(nullptr, testing::tiny_config(), 20, 3);
	EXPECT_EQ(random.episodes, 20);
	EXPECT_LE(random.success_rate, 0.2);
	EXPECT_LT(random.mean_length, 100.0);
	EXPECT_EQ(evaluate(nullptr, config, 20, 3).to_json(), random.to_json());
}

} // namespace
} // namespace resdreamer
