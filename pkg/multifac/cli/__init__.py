"""Command-line surface: file schemas, tensor I/O and subcommands."""
