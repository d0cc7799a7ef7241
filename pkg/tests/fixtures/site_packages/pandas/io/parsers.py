def read_csv(filepath_or_buffer, sep=",", delimiter=None):
    """Read a comma-separated values (csv) file into DataFrame.

    Also supports optionally iterating or breaking of the file into chunks.
    """
