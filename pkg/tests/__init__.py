"Test suite for cross-anatomy domain adaptation"
