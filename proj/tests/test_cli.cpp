#include "resdreamer_cli/cli.h"

#include "resdreamer/pipeline.h"
#include "resdreamer/replay.h"

#include "testing.h"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>

namespace resdreamer
{
namespace
{

namespace fs = std::filesystem;
using json = nlohmann::json;

struct Invocation
{
	int code = 0;
	std::string out;
	std::string err;

	/// The JSON document on the last non-empty stdout line.
	json result() const
	{
		std::istringstream in(out);
		std::string line;
		std::string last;
		while (std::getline(in, line))
		{
			if (!line.empty())
			{
				last = line;
			}
		}
		return json::parse(last);
	}
};

Invocation invoke(const std::vector<std::string>& args)
{
	std::ostringstream out;
	std::ostringstream err;
	Invocation r;
	r.code = cli::run(args, out, err);
	r.out = out.str();
	r.err = err.str();
	return r;
}

std::vector<std::string> train_args(const fs::path& logdir, std::vector<std::string> extra = {})
{
	std::vector<std::string> args{"train", "--logdir", logdir.string()};
	auto overrides = testing::tiny_overrides();
	overrides.push_back("train.env_steps=60");
	overrides.insert(overrides.end(), extra.begin(), extra.end());
	for (const auto& o : overrides)
	{
		args.push_back("--set");
		args.push_back(o);
	}
	return args;
}

/// Width and height from a PNG IHDR chunk.
std::pair<uint32_t, uint32_t> png_size(const fs::path& path)
{
	std::ifstream in(path, std::ios::binary);
	std::vector<unsigned char> header(24);
	in.read(reinterpret_cast<char*>(header.data()), 24);
	auto be = [&](size_t at) {
		return (uint32_t{header[at]} << 24) | (uint32_t{header[at + 1]} << 16) | (uint32_t{header[at + 2]} << 8) |
					 uint32_t{header[at + 3]};
	};
	EXPECT_EQ(header[1], 'P');
	return {be(16), be(20)};
}

/// Trains one tiny two-layer run shared by the read-only commands below.
class CliTrained : public ::testing::Test
{
protected:
	static void SetUpTestSuite()
	{
		logdir_ = testing::scratch_dir("cli_trained");
		auto r = invoke(train_args(logdir_));
		ASSERT_EQ(r.code, 0) << r.err;
		checkpoint_ = logdir_ / "ckpt" / "60";
	}

	static inline fs::path logdir_;
	static inline fs::path checkpoint_;
};

TEST_F(CliTrained, TrainWritesMetricsAndCheckpoint)
{
	EXPECT_TRUE(fs::exists(logdir_ / "metrics.jsonl"));
	EXPECT_TRUE(fs::exists(checkpoint_ / "manifest.json"));
	EXPECT_TRUE(fs::exists(logdir_ / "replay"));
}

TEST_F(CliTrained, EvalIsReproducible)
{
	auto a = invoke({"eval", "--checkpoint", checkpoint_.string(), "--episodes", "2", "--seed", "4"});
	auto b = invoke({"eval", "--checkpoint", checkpoint_.string(), "--episodes", "2", "--seed", "4"});
	ASSERT_EQ(a.code, 0) << a.err;
	EXPECT_EQ(a.out, b.out);
	auto result = a.result();
	EXPECT_TRUE(result["ok"].get<bool>());
	EXPECT_EQ(result["command"], "eval");
	EXPECT_EQ(result["episodes"], 2);
	EXPECT_EQ(result["policy"], "actor");

	auto random = invoke({"eval", "--checkpoint", checkpoint_.string(), "--episodes", "2", "--random"});
	ASSERT_EQ(random.code, 0);
	EXPECT_EQ(random.result()["policy"], "random");
}

TEST_F(CliTrained, EvalRejectsZeroEpisodes)
{
	auto r = invoke({"eval", "--checkpoint", checkpoint_.string(), "--episodes", "0"});
	EXPECT_EQ(r.code, 2);
	EXPECT_FALSE(r.result()["ok"].get<bool>());
	EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTrained, EvalRecordMatchesInspection)
{
	auto dir = testing::scratch_dir("cli_record");
	auto eval = invoke({"eval", "--checkpoint", checkpoint_.string(), "--episodes", "2", "--record", dir.string()});
	ASSERT_EQ(eval.code, 0) << eval.err;
	auto inspect = invoke({"replay-inspect", "--dir", dir.string()});
	ASSERT_EQ(inspect.code, 0) << inspect.err;
	auto report = inspect.result();
	EXPECT_EQ(report["episodes_started"], 2);
	EXPECT_EQ(report["corrupt"], 0);
	const auto mean_length = eval.result()["mean_length"].get<double>();
	// every episode holds its reset observation plus one record per step
	EXPECT_EQ(report["steps"].get<int64_t>(), static_cast<int64_t>(mean_length * 2 + 2));
	EXPECT_EQ(report["terminals"].get<int64_t>() + report["truncations"].get<int64_t>(), 2);
}

TEST_F(CliTrained, VizStripLayout)
{
	auto out = testing::scratch_dir("cli_viz");
	auto r = invoke({"viz", "--checkpoint", checkpoint_.string(), "--episodes", "1", "--seed", "2", "--out", out.string()});
	ASSERT_EQ(r.code, 0) << r.err;
	auto result = r.result();
	// raw | L*F hint frames | L-1 residuals, each 16 pixels wide
	const uint32_t width = (1 + 2 * 4 + 1) * 16;
	EXPECT_EQ(result["strip_width"], width);
	const auto images = result["images"].get<int64_t>();
	EXPECT_GT(images, 0);
	int64_t files = 0;
	for (const auto& entry : fs::directory_iterator(out))
	{
		++files;
		if (files == 1)
		{
			auto [w, h] = png_size(entry.path());
			EXPECT_EQ(w, width);
			EXPECT_EQ(h, 16U);
		}
	}
	EXPECT_EQ(files, images);
}

TEST(Cli, SetOverridesTakeEffect)
{
	auto logdir = testing::scratch_dir("cli_layers");
	auto r = invoke(train_args(logdir, {"hrssm.layers=3", "train.env_steps=40"}));
	ASSERT_EQ(r.code, 0) << r.err;
	auto manifest = json::parse(std::ifstream(logdir / "ckpt" / "40" / "manifest.json"));
	EXPECT_EQ(manifest["config"]["hrssm"]["layers"], 3);
	auto result = r.result();
	EXPECT_EQ(result["command"], "train");
	EXPECT_EQ(result["env_steps"], 40);
}

TEST(Cli, BadArgumentsExitNonZero)
{
	auto logdir = testing::scratch_dir("cli_bad");
	auto unknown = invoke({"train", "--logdir", logdir.string(), "--set", "foo=1"});
	EXPECT_EQ(unknown.code, 2);
	EXPECT_FALSE(unknown.result()["ok"].get<bool>());

	auto no_command = invoke({});
	EXPECT_NE(no_command.code, 0);
	auto missing = invoke({"eval"});
	EXPECT_NE(missing.code, 0);
	auto no_ckpt = invoke({"eval", "--checkpoint", (logdir / "nope").string()});
	EXPECT_NE(no_ckpt.code, 0);
	EXPECT_FALSE(no_ckpt.result()["ok"].get<bool>());
}

TEST(Cli, ReplayInspect)
{
	auto empty = testing::scratch_dir("cli_inspect_empty");
	auto r = invoke({"replay-inspect", "--dir", empty.string()});
	ASSERT_EQ(r.code, 0);
	EXPECT_EQ(r.result()["steps"], 0);
	EXPECT_EQ(r.result()["chunks"], 0);

	auto missing = invoke({"replay-inspect", "--dir", (empty / "absent").string()});
	EXPECT_EQ(missing.code, 2);

	auto config = testing::tiny_config({"env.id=constant", "env.constant_episode_length=9"});
	ReplayBuffer buffer(5000, 16, 16);
	Collector collector(config, 1);
	auto gen = testing::generator(1);
	int64_t episodes = 0;
	for (int i = 0; i < 25; ++i)
	{
		collector.step(nullptr, buffer, gen, episodes);
	}
	auto dir = testing::scratch_dir("cli_inspect");
	buffer.save(dir);
	auto good = invoke({"replay-inspect", "--dir", dir.string()});
	ASSERT_EQ(good.code, 0) << good.err;
	auto report = good.result();
	EXPECT_EQ(report["steps"], 25);
	EXPECT_EQ(report["episodes_started"], 3);
	EXPECT_EQ(report["truncations"], 2);
	EXPECT_EQ(report["terminals"], 0);
	EXPECT_EQ(report["corrupt"], 0);

	std::ofstream(dir / "999999.bin", std::ios::binary) << "garbage";
	auto corrupt = invoke({"replay-inspect", "--dir", dir.string()});
	EXPECT_EQ(corrupt.code, 0);
	EXPECT_EQ(corrupt.result()["corrupt"], 1);
	EXPECT_EQ(corrupt.result()["steps"], 25);
}

} // namespace
} // namespace resdreamer
