import { GatewayApi } from "./api.js";
import { EventFeed } from "./events.js";
import { ConsoleStore } from "./state.js";
import { ControlsView } from "./views/controls.js";
import { FileBrowserView } from "./views/files.js";
import { QueryView } from "./views/queries.js";
import { TopologyView } from "./views/topology.js";

const RECONCILE_MS = 30_000;

export function boot(root: Document = document): { store: ConsoleStore; feed: EventFeed } {
  const api = new GatewayApi("");
  const store = new ConsoleStore();

  const reconcile = async () => {
    try {
      const { records } = await api.getRegistry();
      store.applyRegistry(records);
    } catch {
      // gateway unreachable; the feed's reconnect loop will retry us
    }
  };

  const feed = new EventFeed("/api/events", {
    onEvent: (event) => store.applyEvent(event),
    onConnect: () => void reconcile(),
    onStatus: (connected) => store.setConnected(connected),
  });
  feed.start();
  setInterval(() => void reconcile(), RECONCILE_MS);

  new TopologyView(root.getElementById("topology")!, store);
  new ControlsView(root.getElementById("controls")!, store, api);
  new FileBrowserView(root.getElementById("files")!, store, api);
  new QueryView(root.getElementById("queries")!, store, api);

  const feedEl = root.getElementById("feed")!;
  store.subscribe((state) => {
    feedEl.textContent = state.feed
      .slice(0, 40)
      .map((e) => JSON.stringify(e))
      .join("\n");
  });

  return { store, feed };
}

if (typeof document !== "undefined" && document.getElementById("topology")) {
  boot();
}
