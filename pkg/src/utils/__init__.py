"""This package contains small helpers shared by the tasks: contract checks and latent grid reshaping."""
