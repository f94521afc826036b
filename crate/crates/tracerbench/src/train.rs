// implementation below
