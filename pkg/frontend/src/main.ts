import { api } from "./api";
import { createApp, startPolling } from "./app";

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app container");
  const { palette } = await api.palette();
  const app = createApp(root, palette);
  await app.refresh();
  startPolling(app);
}

void boot();
