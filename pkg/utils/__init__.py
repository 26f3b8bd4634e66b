# Core algorithms for frame scoring, rewards, the policy and the GRPO objective
