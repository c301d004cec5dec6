#pragma once

#include <stdexcept>
#include <string>

namespace resdreamer
{

/// Violated precondition or shape contract.
class ContractError : public std::logic_error
{
public:
	using std::logic_error::logic_error;
};

/// Input outside the mathematical domain of an operation (NaN, infinities).
class DomainError : public std::domain_error
{
public:
	using std::domain_error::domain_error;
};

/// The replay buffer does not hold enough contiguous steps for the request.
class InsufficientDataError : public std::runtime_error
{
public:
	using std::runtime_error::runtime_error;
};

/// A file on disk does not follow the expected layout or version.
class FormatError : public std::runtime_error
{
public:
	using std::runtime_error::runtime_error;
};

inline void expects(bool condition, const std::string& message)
{
	if (!condition)
	{
		throw ContractError(message);
	}
}

} // namespace resdreamer
