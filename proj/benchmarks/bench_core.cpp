#include "resdreamer/agent.h"
#include "resdreamer/numerics.h"
#include "resdreamer/pipeline.h"
#include "resdreamer/replay.h"

#include <benchmark/benchmark.h>

#include <random>

namespace
{

using namespace resdreamer;

TrainConfig desk_config(std::vector<std::string> overrides = {})
{
	overrides.push_back("train.synchronous=true");
	return load_config({}, overrides);
}

HrssmConfig desk_world(int layers)
{
	auto config = desk_config({"hrssm.layers=" + std::to_string(layers)});
	return config.hrssm;
}

ActionProvider first_action()
{
	return [](std::span<const LayerState> layers) {
		auto a = torch::zeros({layers[0].h.size(0), 3});
		a.select(1, 0).fill_(1.0);
		return a;
	};
}

void observe_step(benchmark::State& state)
{
	const int layers = static_cast<int>(state.range(0));
	const int64_t batch = 8;
	torch::manual_seed(0);
	Hrssm model(desk_world(layers));
	auto gen = at::make_generator<at::CPUGeneratorImpl>(0);
	auto obs = torch::rand({batch, 3, 32, 32}, gen) - 0.5;
	auto action = torch::zeros({batch, 3});
	auto first = torch::zeros({batch});
	auto hier = model->initial_state(batch);
	torch::NoGradGuard no_grad;
	for (auto _ : state)
	{
		auto result = model->observe(hier, action, obs, first, Mode::kEval, first_action(), gen);
		benchmark::DoNotOptimize(result.layers.back().recon.raw.data_ptr());
	}
	state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(observe_step)->Arg(1)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);

void imagination(benchmark::State& state)
{
	const int64_t starts = state.range(0);
	auto config = desk_config();
	auto agent = make_agent(config);
	auto gen = at::make_generator<at::CPUGeneratorImpl>(0);
	auto start = agent->initial_state(starts).layers;
	torch::NoGradGuard no_grad;
	for (auto _ : state)
	{
		auto trajectory = agent->world->imagine(start, agent->actor_actions(gen), 15, gen);
		benchmark::DoNotOptimize(trajectory.states.back()[0].h.data_ptr());
	}
	state.SetItemsProcessed(state.iterations() * starts * 15);
}
BENCHMARK(imagination)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void replay_sample(benchmark::State& state)
{
	ReplayBuffer buffer(20000, 32, 32);
	StepRecord record;
	record.image.assign(32 * 32 * 3, 7);
	for (int i = 0; i < 20000; ++i)
	{
		record.is_first = i % 200 == 0;
		buffer.append(record);
	}
	std::mt19937_64 rng(0);
	for (auto _ : state)
	{
		auto chunk = buffer.sample(8, 32, rng);
		benchmark::DoNotOptimize(chunk.images.data_ptr());
	}
	state.SetItemsProcessed(state.iterations() * 8 * 32);
}
BENCHMARK(replay_sample)->Unit(benchmark::kMicrosecond);

void twohot_encode(benchmark::State& state)
{
	auto codec = TwohotCodec::symexp_spaced(255, 20.0);
	auto gen = at::make_generator<at::CPUGeneratorImpl>(0);
	auto values = torch::randn({static_cast<int64_t>(state.range(0))}, gen) * 50.0;
	for (auto _ : state)
	{
		auto encoded = codec.encode(values);
		benchmark::DoNotOptimize(encoded.data_ptr());
	}
	state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(twohot_encode)->Arg(256)->Arg(4096)->Unit(benchmark::kMicrosecond);

void train_step_tiny(benchmark::State& state)
{
	auto config = desk_config(
		{"hrssm.h_size=64", "hrssm.hidden_size=64", "hrssm.latent_groups=8", "hrssm.latent_classes=8",
		 "behavior.hidden_size=64", "train.batch_size=4", "train.batch_length=16"});
	auto agent = make_agent(config);
	auto optimizers = make_optimizers(*agent, 1e-4, 1e-8, 1000.0);
	ReplayBuffer buffer(4096, 32, 32);
	Collector collector(config, 0);
	auto gen = at::make_generator<at::CPUGeneratorImpl>(0);
	int64_t episodes = 0;
	for (int i = 0; i < 512; ++i)
	{
		collector.step(nullptr, buffer, gen, episodes);
	}
	RunState run(0);
	for (auto _ : state)
	{
		auto metrics = train_step(*agent, optimizers, buffer, config, run);
		benchmark::DoNotOptimize(metrics);
	}
}
BENCHMARK(train_step_tiny)->Unit(benchmark::kMillisecond)->Iterations(5);

} // namespace

BENCHMARK_MAIN();
